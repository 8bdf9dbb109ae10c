"""Self-attended visual-semantic embedding.

Captions are tokenized, looked up in a learnable word table and run through a
bidirectional GRU. Forward and backward states are summed per token, scored by
a single affine map, softmax-normalized, and pooled into one sentence vector.
Images are encoded into the same latent space by a small strided CNN followed
by one affine map, and both encoders are trained jointly with a bidirectional
max-margin ranking loss over cosine similarities.

Pipeline:
  ① tokenize         → TokenSequence (lowercase, strip punctuation, UNK for OOV)
  ② embed_tokens     → n × d_w word vectors (PAD row is zero)
  ③ encode_sequence  → SentenceEncoding(per_token, attention, sentence)
  ④ encode_image     → d_h image embedding
  ⑤ ranking_loss     → scalar hinge, averaged over contrastive pairs
  ⑥ pretrain_vse     → trained + frozen model, loss history
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from canvasgan.config import RunConfig, VSEConfig, subsystem_seed
from canvasgan.errors import (
    BatchTooSmall,
    EmptyCaption,
    IndexOutOfRange,
    NonFiniteLoss,
    ShapeMismatch,
)
from canvasgan.ops import cosine_matrix, length_mask, masked_softmax

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1

_PUNCT_RE = re.compile(r"[^\w\s]")


# ---------------------------------------------------------------------------
# Vocabulary & tokenization
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    """Bijective token ↔ index map; index 0 is PAD, index 1 is UNK."""
    tokens: list[str] = field(default_factory=lambda: [PAD, UNK])
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.tokens[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with PAD, UNK")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        """Index of ``token``, or ``UNK_INDEX`` when it is not in the vocabulary."""
        return self.index.get(token, UNK_INDEX)

    @classmethod
    def build(cls, captions: Iterable[str]) -> "Vocabulary":
        """Vocabulary over every word of ``captions``, sorted for determinism."""
        words = sorted({w for c in captions for w in split_words(c)} - {PAD, UNK})
        return cls(tokens=[PAD, UNK, *words])

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, ensure_ascii=False, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(tokens=list(json.loads(text)["tokens"]))


@dataclass(frozen=True)
class TokenSequence:
    indices: list[int]
    raw_tokens: list[str]

    def __len__(self) -> int:
        return len(self.indices)


def split_words(caption: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return _PUNCT_RE.sub(" ", caption.lower()).split()


def tokenize(caption: str, vocab: Vocabulary) -> TokenSequence:
    words = split_words(caption)
    if not words:
        raise EmptyCaption(f"caption has no tokens: {caption!r}")
    return TokenSequence(indices=[vocab.lookup(w) for w in words], raw_tokens=words)


def pad_sequences(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack sequences into a PAD-filled (B, n_max) index tensor plus lengths."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), int(lengths.max())), PAD_INDEX, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s.indices, dtype=torch.long)
    return out, lengths


# ---------------------------------------------------------------------------
# Word embeddings
# ---------------------------------------------------------------------------

class WordEmbeddingTable(nn.Module):
    """K × d_w learnable table; the PAD row is zero and receives no gradient."""

    def __init__(self, vocab_size: int, word_dim: int, init_range: float = 0.1) -> None:
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, word_dim, padding_idx=PAD_INDEX)
        nn.init.uniform_(self.embedding.weight, -init_range, init_range)
        with torch.no_grad():
            self.embedding.weight[PAD_INDEX].zero_()

    @property
    def matrix(self) -> torch.Tensor:
        return self.embedding.weight

    @property
    def vocab_size(self) -> int:
        return self.embedding.num_embeddings

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= self.vocab_size):
            raise IndexOutOfRange(
                f"token index outside [0, {self.vocab_size}): "
                f"min={int(indices.min())} max={int(indices.max())}"
            )
        return self.embedding(indices)


def embed_tokens(seq: TokenSequence, table: WordEmbeddingTable) -> torch.Tensor:
    """n × d_w rows gathered from ``table`` for one sequence."""
    return table(torch.tensor(seq.indices, dtype=torch.long))


def load_pretrained_table(
    path: str | Path,
    vocab: Vocabulary,
    word_dim: int,
    init_range: float = 0.1,
) -> WordEmbeddingTable:
    """Build a table whose rows come from a `token v1 .. v_dw` text file where known.

    Tokens missing from the file keep their random init; file tokens missing
    from the vocabulary are ignored.
    """
    table = WordEmbeddingTable(vocab.size, word_dim, init_range)
    hits = 0
    with open(path, "r", encoding="utf-8") as f, torch.no_grad():
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != word_dim:
                raise ShapeMismatch(
                    f"{path}:{lineno}: expected {word_dim} values for {token!r}, got {len(values)}"
                )
            idx = vocab.index.get(token)
            if idx is None or idx == PAD_INDEX:
                continue
            try:
                row = torch.tensor([float(v) for v in values])
            except ValueError:
                logger.warning("Skipping non-numeric embedding row %s:%d", path, lineno)
                continue
            table.matrix[idx] = row
            hits += 1
    logger.info("Loaded %d/%d pretrained word vectors from %s", hits, vocab.size - 2, path)
    return table


# ---------------------------------------------------------------------------
# Sentence encoder
# ---------------------------------------------------------------------------

@dataclass
class SentenceEncoding:
    """Batched encoder output; padded positions carry zero state and zero weight."""
    per_token: torch.Tensor   # (B, n, d_h)  summed bidirectional states
    attention: torch.Tensor   # (B, n)       softmax-normalized scores
    sentence: torch.Tensor    # (B, d_h)     attention-pooled vector
    mask: torch.Tensor        # (B, n) bool

    def index(self, idx: torch.Tensor) -> "SentenceEncoding":
        return SentenceEncoding(self.per_token[idx], self.attention[idx],
                                self.sentence[idx], self.mask[idx])

    def roll(self, shifts: int) -> "SentenceEncoding":
        return SentenceEncoding(*(torch.roll(t, shifts, dims=0) for t in
                                  (self.per_token, self.attention, self.sentence, self.mask)))

    def detach(self) -> "SentenceEncoding":
        return SentenceEncoding(self.per_token.detach(), self.attention.detach(),
                                self.sentence.detach(), self.mask)


class SentenceEncoder(nn.Module):
    """Bidirectional GRU + affine scoring + softmax pooling."""

    def __init__(self, word_dim: int, hidden_dim: int) -> None:
        super().__init__()
        self.hidden_dim = hidden_dim
        self.rnn = nn.GRU(word_dim, hidden_dim, batch_first=True, bidirectional=True)
        self.score = nn.Linear(hidden_dim, 1)

    def forward(self, g: torch.Tensor, lengths: torch.Tensor) -> SentenceEncoding:
        n = g.shape[1]
        packed = pack_padded_sequence(g, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=n)
        per_token = out[..., : self.hidden_dim] + out[..., self.hidden_dim:]
        mask = length_mask(lengths.to(g.device), n)
        attention = masked_softmax(self.score(per_token).squeeze(-1), mask)
        sentence = torch.einsum("bn,bnd->bd", attention, per_token)
        return SentenceEncoding(per_token, attention, sentence, mask)


def encode_sequence(g: torch.Tensor, encoder: SentenceEncoder) -> SentenceEncoding:
    """Encode one n × d_w sequence; the returned encoding has batch size 1."""
    if g.dim() != 2 or g.shape[0] < 1:
        raise ShapeMismatch(f"expected an (n, d_w) matrix with n >= 1, got {tuple(g.shape)}")
    lengths = torch.tensor([g.shape[0]], dtype=torch.long)
    return encoder(g.unsqueeze(0), lengths)


# ---------------------------------------------------------------------------
# Image encoder
# ---------------------------------------------------------------------------

class ImageEncoder(nn.Module):
    """Strided conv blocks → global average pool → affine map into d_h."""

    def __init__(self, image_size: int, channels: Sequence[int], hidden_dim: int) -> None:
        super().__init__()
        self.image_size = image_size
        blocks: list[nn.Module] = []
        in_ch = 3
        for ch in channels:
            blocks += [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = ch
        self.backbone = nn.Sequential(*blocks, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.project = nn.Linear(in_ch, hidden_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.project(self.backbone(images))


def encode_image(image: torch.Tensor, encoder: ImageEncoder) -> torch.Tensor:
    """Embed one (3, H, W) image or a (B, 3, H, W) batch."""
    single = image.dim() == 3
    batch = image.unsqueeze(0) if single else image
    s = encoder.image_size
    if batch.dim() != 4 or tuple(batch.shape[1:]) != (3, s, s):
        raise ShapeMismatch(f"expected images of shape (3, {s}, {s}), got {tuple(image.shape)}")
    out = encoder(batch)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Joint model
# ---------------------------------------------------------------------------

class VisualSemanticEmbedding(nn.Module):
    def __init__(self, vocab_size: int, cfg: VSEConfig, image_size: int) -> None:
        super().__init__()
        self.cfg = cfg
        self.words = WordEmbeddingTable(vocab_size, cfg.word_dim, cfg.embedding_init)
        self.text = SentenceEncoder(cfg.word_dim, cfg.hidden_dim)
        self.image = ImageEncoder(image_size, cfg.image_channels, cfg.hidden_dim)

    @property
    def hidden_dim(self) -> int:
        return self.cfg.hidden_dim

    def encode_captions(self, indices: torch.Tensor, lengths: torch.Tensor) -> SentenceEncoding:
        return self.text(self.words(indices), lengths)

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        return encode_image(images, self.image)

    def freeze(self) -> "VisualSemanticEmbedding":
        self.eval()
        self.requires_grad_(False)
        return self


def ranking_loss(image_embs: torch.Tensor, sent_embs: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Bidirectional max-margin hinge over cosine similarity.

    Each of the B(B-1) contrastive terms in each direction is
    ``max(0, margin - s(i, i) + s(contrastive))``; the result is the mean over
    all 2·B(B-1) terms, so it is bounded by ``margin + 2``.
    """
    b = image_embs.shape[0]
    if b < 2:
        raise BatchTooSmall(f"ranking loss needs B >= 2, got {b}")
    if sent_embs.shape != image_embs.shape:
        raise ShapeMismatch(f"{tuple(image_embs.shape)} vs {tuple(sent_embs.shape)}")
    scores = cosine_matrix(image_embs, sent_embs)      # [image i, sentence j]
    diag = scores.diag()
    cost_sent = (margin + scores - diag.unsqueeze(1)).clamp(min=0)   # image i vs wrong sentences
    cost_img = (margin + scores - diag.unsqueeze(0)).clamp(min=0)    # sentence j vs wrong images
    off = ~torch.eye(b, dtype=torch.bool, device=scores.device)
    total = cost_sent[off].sum() + cost_img[off].sum()
    return total / (2 * b * (b - 1))


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass
class VSEResult:
    model: VisualSemanticEmbedding
    vocab: Vocabulary
    history: list[tuple[int, float]]


def tokenize_all(captions: Sequence[str], vocab: Vocabulary) -> tuple[torch.Tensor, torch.Tensor]:
    return pad_sequences([tokenize(c, vocab) for c in captions])


def build_vse(vocab: Vocabulary, cfg: RunConfig) -> VisualSemanticEmbedding:
    torch.manual_seed(subsystem_seed(cfg.seed, "vse"))
    model = VisualSemanticEmbedding(vocab.size, cfg.vse, cfg.data.image_size)
    if cfg.vse.pretrained_embeddings:
        model.words = load_pretrained_table(
            cfg.vse.pretrained_embeddings, vocab, cfg.vse.word_dim, cfg.vse.embedding_init
        )
    return model


def pretrain_vse(dataset: Sequence, cfg: RunConfig, vocab: Vocabulary | None = None) -> VSEResult:
    """Train word table, sentence encoder and image encoder on the ranking loss.

    The returned model is frozen (eval mode, no gradients).
    """
    from canvasgan.data import images_to_tensor

    captions = [s.caption for s in dataset]
    vocab = vocab or Vocabulary.build(captions)
    model = build_vse(vocab, cfg)
    indices, lengths = tokenize_all(captions, vocab)
    images = images_to_tensor(dataset)
    n = len(dataset)
    batch = min(cfg.vse.batch_size, n)
    if batch < 2:
        raise BatchTooSmall(f"VSE pretraining needs at least 2 samples, got {n}")

    gen = torch.Generator().manual_seed(subsystem_seed(cfg.seed, "vse-batches"))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.vse.lr)
    history: list[tuple[int, float]] = []
    model.train()
    logger.info("VSE pretraining: %d pairs, vocab %d, %d steps", n, vocab.size, cfg.vse.steps)

    for step in range(cfg.vse.steps):
        idx = torch.randperm(n, generator=gen)[:batch]
        enc = model.encode_captions(indices[idx], lengths[idx])
        loss = ranking_loss(model.encode_images(images[idx]), enc.sentence, cfg.vse.margin)
        value = float(loss.item())
        if not math.isfinite(value):
            raise NonFiniteLoss(f"VSE ranking loss is {value} at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append((step, value))
        if step % cfg.vse.log_every == 0:
            logger.info("vse step %d loss %.4f", step, value)

    return VSEResult(model=model.freeze(), vocab=vocab, history=history)


@torch.no_grad()
def embed_pairs(
    model: VisualSemanticEmbedding,
    images: torch.Tensor,
    indices: torch.Tensor,
    lengths: torch.Tensor,
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Image and sentence embeddings for row-aligned pairs, as numpy arrays."""
    img_out, sent_out = [], []
    for start in range(0, images.shape[0], chunk):
        sl = slice(start, start + chunk)
        img_out.append(model.encode_images(images[sl]))
        sent_out.append(model.encode_captions(indices[sl], lengths[sl]).sentence)
    return torch.cat(img_out).cpu().numpy(), torch.cat(sent_out).cpu().numpy()
