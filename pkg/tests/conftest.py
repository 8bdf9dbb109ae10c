"""Shared fixtures: tiny run configs and a central finite-difference gradient check."""

from __future__ import annotations

import os
import tempfile
from typing import Callable

import pytest
import torch

# Keep default run output out of the working tree BEFORE any config is built
os.environ.setdefault("CANVASGAN_OUT_DIR", tempfile.mkdtemp(prefix="canvasgan_runs_"))

from canvasgan.config import RunConfig, build_config  # noqa: E402

TINY = {
    "seed": 0,
    "vse.word_dim": 8,
    "vse.hidden_dim": 8,
    "vse.image_channels": [4, 8],
    "vse.steps": 5,
    "vse.batch_size": 4,
    "vse.log_every": 1,
    "generator.timesteps": 2,
    "generator.noise_dim": 4,
    "generator.cond_dim": 4,
    "generator.hidden_dim": 8,
    "generator.image_size": 8,
    "generator.plane_size": 4,
    "generator.channels": 4,
    "discriminator.base_channels": 4,
    "training.steps": 3,
    "training.batch_size": 4,
    "training.checkpoint_every": 2,
    "training.log_every": 1,
    "data.image_size": 8,
    "data.colors": ["red", "blue"],
    "data.shapes": ["circle", "square"],
    "data.backgrounds": ["gray"],
    "data.samples_per_class": 3,
    "data.holdout_fraction": 0.25,
    "metrics.splits": 2,
    "metrics.num_samples": 8,
    "metrics.recall_ks": [1, 2],
    "metrics.recall_rounds": 4,
    "metrics.classifier_epochs": 2,
}


@pytest.fixture(scope="session")
def tiny_flat() -> dict:
    """The flat tiny overrides, for fixtures wider than one test."""
    return dict(TINY)


@pytest.fixture
def tiny_config(tmp_path) -> Callable[..., RunConfig]:
    """Factory for a desk-tiny RunConfig; keyword args are flat ``section.key`` overrides."""

    def make(**overrides) -> RunConfig:
        flat = {**TINY, "out_dir": str(tmp_path / "run")}
        flat.update({k.replace("__", "."): v for k, v in overrides.items()})
        return build_config(flat)

    return make


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.fixture
def grad_check() -> Callable[..., None]:
    """Compare autograd against central differences for a few entries of ``param``.

    ``loss_fn`` must be a deterministic closure returning a float64 scalar.
    """

    def check(loss_fn: Callable[[], torch.Tensor], param: torch.Tensor,
              entries: int = 4, eps: float = 1e-5, tol: float = 1e-4) -> None:
        assert param.dtype == torch.float64
        if param.grad is not None:
            param.grad = None
        loss_fn().backward()
        analytic = param.grad.detach().clone().reshape(-1)
        flat = param.data.reshape(-1)
        gen = torch.Generator().manual_seed(1234)
        picks = torch.randperm(flat.numel(), generator=gen)[:entries].tolist()
        for idx in picks:
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + eps
                plus = float(loss_fn())
                flat[idx] = orig - eps
                minus = float(loss_fn())
                flat[idx] = orig
            numeric = (plus - minus) / (2 * eps)
            assert _rel_err(float(analytic[idx]), numeric) < tol or abs(float(analytic[idx]) - numeric) < 1e-9, (
                f"entry {idx}: analytic {float(analytic[idx])!r} vs numeric {numeric!r}"
            )

    return check
