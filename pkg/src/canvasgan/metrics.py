"""Evaluation metrics: inception score over classifier posteriors and retrieval recall.

The inception score is exp(E_x KL(p(y|x) || p(y))) per split, with p(y) the
split's marginal; mean and population std over splits are reported. The
posteriors come from any classifier; ``DeskClassifier`` is a small CNN
trained on the synthetic class ids.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.special import rel_entr
from torch import nn

from canvasgan.config import MetricsConfig
from canvasgan.errors import BatchTooSmall, InvalidDistribution, ShapeMismatch

logger = logging.getLogger(__name__)

DISTRIBUTION_TOL = 1e-6


# ---------------------------------------------------------------------------
# Inception score
# ---------------------------------------------------------------------------

def check_posteriors(posteriors: np.ndarray) -> np.ndarray:
    """Validate an N x K matrix of class posteriors and return it as float64.

    Raises ``InvalidDistribution`` on empty input, non-finite or negative
    entries, or a row whose sum is off by more than ``DISTRIBUTION_TOL``.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0:
        raise InvalidDistribution(f"posteriors must be a non-empty N x K matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidDistribution("posteriors contain non-finite values")
    if np.any(p < 0):
        raise InvalidDistribution("posteriors contain negative entries")
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > DISTRIBUTION_TOL)
    if bad.size:
        raise InvalidDistribution(f"row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")
    return p


def split_score(p: np.ndarray) -> float:
    """exp of the mean KL(p(y|x) || p(y)) over the rows of one split."""
    marginal = p.mean(axis=0, keepdims=True)
    kl = rel_entr(p, marginal).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_score(posteriors: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """Return (mean, population std) of the per-split scores."""
    p = check_posteriors(posteriors)
    n = p.shape[0]
    if splits < 1 or n < splits:
        raise InvalidDistribution(f"need N >= splits >= 1, got N={n}, splits={splits}")
    scores = np.array([split_score(part) for part in np.array_split(p, splits)])
    return float(scores.mean()), float(scores.std())


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def caption_ranks(image_embs: np.ndarray, sent_embs: np.ndarray) -> np.ndarray:
    """0-based rank of each caption's matching image among all images.

    Images scoring higher than the match come first; on a tie the lower
    image index wins.
    """
    img = _normalize_rows(image_embs)
    sent = _normalize_rows(sent_embs)
    if img.shape != sent.shape:
        raise ShapeMismatch(f"image embeddings {img.shape} vs sentence embeddings {sent.shape}")
    n = img.shape[0]
    if n < 2:
        raise BatchTooSmall(f"retrieval needs at least 2 pairs, got {n}")
    sims = sent @ img.T
    own = np.diag(sims)[:, None]
    lower = np.tri(n, k=-1, dtype=bool)
    return (sims > own).sum(axis=1) + ((sims == own) & lower).sum(axis=1)


def retrieval_recall(image_embs: np.ndarray, sent_embs: np.ndarray, k: int) -> float:
    """Fraction of captions whose matching image is among the k nearest by cosine."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return float(np.mean(caption_ranks(image_embs, sent_embs) < k))


def class_grouped_recall(
    image_embs: np.ndarray,
    sent_embs: np.ndarray,
    class_ids: Sequence[int],
    ks: Sequence[int] = (1,),
    rounds: int = 50,
    seed: int = 0,
) -> dict[int, float]:
    """Recall@k averaged over groups that hold one random pair per class.

    Chance level for recall@1 is 1 / number of classes.
    """
    labels = np.asarray(class_ids)
    classes = np.unique(labels)
    if classes.size < 2:
        raise BatchTooSmall(f"grouped recall needs at least 2 classes, got {classes.size}")
    members = [np.flatnonzero(labels == c) for c in classes]
    rng = np.random.default_rng(seed)
    img = np.asarray(image_embs)
    sent = np.asarray(sent_embs)
    totals = {k: 0.0 for k in ks}
    for _ in range(rounds):
        pick = np.array([rng.choice(m) for m in members])
        ranks = caption_ranks(img[pick], sent[pick])
        for k in ks:
            totals[k] += float(np.mean(ranks < k))
    return {k: totals[k] / rounds for k in ks}


# ---------------------------------------------------------------------------
# Desk classifier
# ---------------------------------------------------------------------------

class DeskClassifier(nn.Module):
    """Small conv classifier over the synthetic class ids; stands in for Inception."""

    def __init__(self, num_classes: int, channels: Sequence[int] = (16, 32)) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for ch in channels:
            layers += [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = ch
        self.features = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Linear(in_ch, num_classes)
        self.num_classes = num_classes

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images))


@dataclass
class ClassifierResult:
    model: DeskClassifier
    accuracy: float
    epochs: int


@torch.no_grad()
def classifier_accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor,
                        chunk: int = 256) -> float:
    model.eval()
    correct = 0
    for start in range(0, images.shape[0], chunk):
        logits = model(images[start:start + chunk])
        correct += int((logits.argmax(dim=1) == labels[start:start + chunk]).sum())
    return correct / max(images.shape[0], 1)


def train_classifier(
    images: torch.Tensor,
    labels: Sequence[int] | torch.Tensor,
    cfg: MetricsConfig,
    seed: int,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> ClassifierResult:
    """Fit a DeskClassifier until train accuracy reaches the target or epochs run out."""
    y = torch.as_tensor(labels, dtype=torch.long)
    if y.shape[0] != images.shape[0]:
        raise ShapeMismatch(f"{images.shape[0]} images vs {y.shape[0]} labels")
    torch.manual_seed(seed)
    model = DeskClassifier(int(y.max()) + 1)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    loss_fn = nn.CrossEntropyLoss()
    n = images.shape[0]
    accuracy, epoch = 0.0, 0
    for epoch in range(1, cfg.classifier_epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = loss_fn(model(images[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        accuracy = classifier_accuracy(model, images, y)
        logger.info("classifier epoch %d accuracy %.3f", epoch, accuracy)
        if accuracy >= cfg.classifier_target_accuracy:
            break
    if accuracy < cfg.classifier_target_accuracy:
        logger.warning("Classifier stopped at %.3f train accuracy (target %.2f)",
                       accuracy, cfg.classifier_target_accuracy)
    model.eval()
    return ClassifierResult(model=model, accuracy=accuracy, epochs=epoch)


@torch.no_grad()
def posteriors(model: nn.Module, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    """Softmax class posteriors as float64 rows that sum to 1."""
    model.eval()
    out = []
    for start in range(0, images.shape[0], chunk):
        out.append(torch.softmax(model(images[start:start + chunk]).to(torch.float64), dim=1))
    p = torch.cat(out).cpu().numpy()
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    inception_mean: float
    inception_std: float
    recall_at: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "inception_mean": self.inception_mean,
            "inception_std": self.inception_std,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
        }


def write_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
