"""Adversarial training with matching, mismatching and relevant captions.

Each step draws a batch of (image, caption) pairs and derives two extra
caption batches by rolling the matching captions along the batch axis:

  - mismatching: roll by 1 (every image gets a wrong caption)
  - relevant:    roll by ⌊B/2⌋

The discriminator is pushed towards 1 on (real image, matching caption),
towards 0 on (real image, mismatching caption) and towards 0 on
(image painted from the relevant caption, relevant caption). The generator is
then updated once with the non-saturating objective on images painted from
the matching captions plus ``kl_weight`` times the conditioning KL, averaged over the condition
dimensions unless ``training.kl_per_dim`` is off.

The visual-semantic encoder stays frozen throughout; caption encodings are
computed once up front.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence, TypeVar

import numpy as np
import pandas as pd
import torch

from canvasgan.checkpoint import save_checkpoint
from canvasgan.config import RunConfig, subsystem_seed
from canvasgan.data import Sample, images_to_tensor
from canvasgan.discriminator import Discriminator
from canvasgan.errors import BatchTooSmall, NonFiniteLoss
from canvasgan.generator import AugmentedCondition, CanvasGenerator
from canvasgan.ops import all_finite
from canvasgan.vse import SentenceEncoding, VSEResult, tokenize_all

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "g_loss", "d_match", "d_mismatch", "d_relevant"]
LOSSES_FILE = "losses.csv"

T = TypeVar("T")


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------

def _batch_len(captions: Any) -> int:
    if isinstance(captions, SentenceEncoding):
        return captions.sentence.shape[0]
    return len(captions)


def roll_batch(captions: T, shift: int) -> T:
    """Circular roll along the batch axis: ``out[i] = in[(i - shift) mod B]``."""
    if isinstance(captions, SentenceEncoding):
        return captions.roll(shift)
    if isinstance(captions, torch.Tensor):
        return torch.roll(captions, shift, dims=0)
    if isinstance(captions, np.ndarray):
        return np.roll(captions, shift, axis=0)
    items = list(captions)
    b = len(items)
    shift %= b
    rolled = items[b - shift:] + items[: b - shift]
    return type(captions)(rolled) if isinstance(captions, tuple) else rolled


def make_mismatching(captions: T) -> T:
    """Shift by one so every image is paired with another item's caption."""
    b = _batch_len(captions)
    if b < 2:
        raise BatchTooSmall(f"mismatching batch needs B >= 2, got {b}")
    return roll_batch(captions, 1)


def make_relevant(captions: T) -> T:
    """Shift by half the batch."""
    b = _batch_len(captions)
    if b < 2:
        raise BatchTooSmall(f"relevant batch needs B >= 2, got {b}")
    return roll_batch(captions, b // 2)


@dataclass
class BatchTriple:
    images: torch.Tensor
    match: SentenceEncoding
    mismatch: SentenceEncoding
    relevant: SentenceEncoding

    @classmethod
    def build(cls, images: torch.Tensor, match: SentenceEncoding) -> "BatchTriple":
        return cls(images, match, make_mismatching(match), make_relevant(match))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bce(prob: torch.Tensor, target: float, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy against a constant label, probabilities clamped to [eps, 1-eps]."""
    p = prob.clamp(eps, 1 - eps)
    if target == 1.0:
        return -torch.log(p).mean()
    if target == 0.0:
        return -torch.log1p(-p).mean()
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


@dataclass
class DiscriminatorParts:
    match: torch.Tensor
    mismatch: torch.Tensor
    relevant: torch.Tensor


def _require_finite(*values: torch.Tensor, what: str) -> None:
    for v in values:
        if not all_finite(v):
            raise NonFiniteLoss(f"{what} is not finite: {v.detach().cpu().tolist()}")


def discriminator_loss_from_probs(
    p_match: torch.Tensor,
    p_mismatch: torch.Tensor,
    p_relevant: torch.Tensor,
    eps: float = 1e-7,
) -> tuple[torch.Tensor, DiscriminatorParts]:
    parts = DiscriminatorParts(
        match=bce(p_match, 1.0, eps),
        mismatch=bce(p_mismatch, 0.0, eps),
        relevant=bce(p_relevant, 0.0, eps),
    )
    total = parts.match + parts.mismatch + parts.relevant
    _require_finite(total, what="discriminator loss")
    return total, parts


def discriminator_loss(
    d: Discriminator,
    images: torch.Tensor,
    triple: BatchTriple,
    generated_rel: torch.Tensor,
    eps: float = 1e-7,
) -> tuple[torch.Tensor, DiscriminatorParts]:
    return discriminator_loss_from_probs(
        d(images, triple.match.sentence).probability,
        d(images, triple.mismatch.sentence).probability,
        d(generated_rel.detach(), triple.relevant.sentence).probability,
        eps,
    )


def generator_loss_from_probs(
    p_fake: torch.Tensor,
    kl: torch.Tensor,
    kl_weight: float = 2.0,
    eps: float = 1e-7,
) -> torch.Tensor:
    loss = bce(p_fake, 1.0, eps) + kl_weight * kl.mean()
    _require_finite(loss, what="generator loss")
    return loss


def condition_penalty(cond: AugmentedCondition, per_dim: bool = True) -> torch.Tensor:
    """Per-sample conditioning KL as it enters the generator loss.

    With ``per_dim`` the sum over condition dims becomes a mean.
    """
    return cond.kl / cond.mu.shape[-1] if per_dim else cond.kl


def generator_loss(
    d: Discriminator,
    generated_match: torch.Tensor,
    match: SentenceEncoding,
    kl: torch.Tensor,
    kl_weight: float = 2.0,
    eps: float = 1e-7,
) -> torch.Tensor:
    return generator_loss_from_probs(d(generated_match, match.sentence).probability, kl, kl_weight, eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    g_loss: float
    d_match: float
    d_mismatch: float
    d_relevant: float

    def as_row(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class TrainResult:
    generator: CanvasGenerator
    discriminator: Discriminator
    records: list[LossRecord]
    checkpoints: list[Path] = field(default_factory=list)

    def losses_frame(self) -> pd.DataFrame:
        return records_frame(self.records)


def records_frame(records: Sequence[LossRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in records], columns=LOSS_COLUMNS)


def append_losses(path: Path, records: Sequence[LossRecord]) -> None:
    """Append ``records`` to the losses CSV, writing the header only for a new file."""
    if not records:
        return
    records_frame(records).to_csv(path, mode="a", header=not path.exists(), index=False,
                                  float_format="%.8g")


def build_generator(text_dim: int, cfg: RunConfig) -> CanvasGenerator:
    # init depends only on the root seed
    torch.manual_seed(subsystem_seed(cfg.seed, "generator"))
    return CanvasGenerator(text_dim, cfg.generator)


def build_discriminator(text_dim: int, cfg: RunConfig) -> Discriminator:
    torch.manual_seed(subsystem_seed(cfg.seed, "discriminator"))
    return Discriminator(cfg.data.image_size, text_dim, cfg.discriminator)


class Trainer:
    """Alternating one-D-then-one-G updates over a frozen caption encoder."""

    def __init__(self, dataset: Sequence[Sample], vse: VSEResult, cfg: RunConfig,
                 out_dir: str | Path | None = None) -> None:
        if len(dataset) < 2:
            raise BatchTooSmall(f"training needs at least 2 samples, got {len(dataset)}")
        self.cfg = cfg
        self.vse = vse
        self.out_dir = Path(out_dir) if out_dir is not None else None
        tc = cfg.training
        text_dim = vse.model.hidden_dim
        self.generator = build_generator(text_dim, cfg)
        self.discriminator = build_discriminator(text_dim, cfg)
        self.g_opt = torch.optim.Adam(self.generator.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2))
        self.d_opt = torch.optim.Adam(self.discriminator.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2))
        self.batch_gen = torch.Generator().manual_seed(subsystem_seed(cfg.seed, "train-batches"))
        self.noise_gen = torch.Generator().manual_seed(subsystem_seed(cfg.seed, "train-noise"))
        self.batch_size = min(tc.batch_size, len(dataset))

        self.images = images_to_tensor(dataset)
        indices, lengths = tokenize_all([s.caption for s in dataset], vse.vocab)
        with torch.no_grad():
            self.encodings = vse.model.encode_captions(indices, lengths).detach()
        self.records: list[LossRecord] = []
        self.checkpoints: list[Path] = []
        self._unflushed: list[LossRecord] = []

    def sample_batch(self) -> BatchTriple:
        idx = torch.randperm(self.images.shape[0], generator=self.batch_gen)[: self.batch_size]
        return BatchTriple.build(self.images[idx], self.encodings.index(idx))

    def paint(self, enc: SentenceEncoding):
        return self.generator.paint(enc.per_token, enc.sentence, enc.mask, rng=self.noise_gen)

    def discriminator_step(self, triple: BatchTriple) -> DiscriminatorParts:
        with torch.no_grad():
            fake_rel = self.paint(triple.relevant).image
        total, parts = discriminator_loss(self.discriminator, triple.images, triple, fake_rel,
                                          self.cfg.training.bce_eps)
        self.d_opt.zero_grad(set_to_none=True)
        total.backward()
        self.d_opt.step()
        return parts

    def generator_step(self, triple: BatchTriple) -> torch.Tensor:
        result = self.paint(triple.match)
        tc = self.cfg.training
        kl = condition_penalty(result.condition, tc.kl_per_dim)
        loss = generator_loss(self.discriminator, result.image, triple.match, kl, tc.kl_weight, tc.bce_eps)
        self.g_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.g_opt.step()
        return loss

    def step(self, step: int) -> LossRecord:
        triple = self.sample_batch()
        try:
            parts = self.discriminator_step(triple)
            g_loss = self.generator_step(triple)
        except NonFiniteLoss as exc:
            exc.step = step
            raise
        record = LossRecord(
            step=step,
            g_loss=float(g_loss.item()),
            d_match=float(parts.match.item()),
            d_mismatch=float(parts.mismatch.item()),
            d_relevant=float(parts.relevant.item()),
        )
        self.records.append(record)
        self._unflushed.append(record)
        return record

    def checkpoint(self, step: int) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        append_losses(self.out_dir / LOSSES_FILE, self._unflushed)
        self._unflushed = []
        path = save_checkpoint(
            self.out_dir / f"ckpt_{step}",
            {"vse": self.vse.model, "generator": self.generator, "discriminator": self.discriminator},
            self.cfg,
            self.vse.vocab,
            step=step,
        )
        self.checkpoints.append(path)
        return path

    def run(self) -> TrainResult:
        tc = self.cfg.training
        logger.info("GAN training: %d samples, batch %d, %d steps",
                    self.images.shape[0], self.batch_size, tc.steps)
        self.generator.train()
        self.discriminator.train()
        for step in range(1, tc.steps + 1):
            try:
                record = self.step(step)
            except NonFiniteLoss:
                last = self.checkpoints[-1] if self.checkpoints else None
                logger.error("Non-finite loss at step %d; last good checkpoint: %s", step, last)
                raise
            if step % tc.log_every == 0 or step == 1:
                logger.info(
                    "step %d g=%.4f d_match=%.4f d_mismatch=%.4f d_relevant=%.4f",
                    step, record.g_loss, record.d_match, record.d_mismatch, record.d_relevant,
                )
            if step % tc.checkpoint_every == 0 or step == tc.steps:
                self.checkpoint(step)
        self.generator.eval()
        self.discriminator.eval()
        return TrainResult(self.generator, self.discriminator, self.records, self.checkpoints)


def train(dataset: Sequence[Sample], vse: VSEResult, cfg: RunConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run the full adversarial schedule; all randomness derives from ``cfg.seed``."""
    return Trainer(dataset, vse, cfg, out_dir).run()


def mean_loss(records: Sequence[LossRecord], column: str, first: int, last: int) -> float:
    """Mean of ``column`` over records with ``first <= step <= last``."""
    vals = [getattr(r, column) for r in records if first <= r.step <= last]
    return float(np.mean(vals)) if vals else math.nan
