"""Run configuration: one pydantic model per subsystem plus the flat file format.

Config files are human-readable ``section.key=value`` lines::

    # desk run
    seed=7
    generator.timesteps=4
    data.colors=["red", "green"]

Values are parsed as JSON literals when possible and kept as strings
otherwise. Precedence is flags > file > defaults; ``out_dir`` defaults to
``$CANVASGAN_OUT_DIR`` (or ``./runs``).
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from canvasgan.errors import ConfigError

logger = logging.getLogger(__name__)


def _default_out_dir() -> str:
    return os.environ.get("CANVASGAN_OUT_DIR", "./runs")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

class VSEConfig(_Section):
    """Self-attended visual-semantic encoder and its ranking pretraining."""
    word_dim: int = Field(64, ge=1, description="d_w, word-embedding width")
    hidden_dim: int = Field(256, ge=1, description="d_h, shared text/image latent width")
    embedding_init: float = Field(0.1, gt=0, description="uniform init range for learned word vectors")
    pretrained_embeddings: str | None = Field(None, description="optional `token v1 .. v_dw` text file")
    image_channels: list[int] = Field(default_factory=lambda: [32, 64, 128],
                                      description="widths of the strided conv blocks of the image encoder")
    margin: float = Field(0.2, ge=0, description="ranking hinge margin")
    steps: int = Field(1000, ge=1)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(1e-3, gt=0)
    log_every: int = Field(50, ge=1)


class GeneratorConfig(_Section):
    """Recurrent canvas painter."""
    timesteps: int = Field(4, ge=1, description="t, number of patches painted")
    noise_dim: int = Field(100, ge=1, description="D")
    cond_dim: int = Field(128, ge=1, description="d_c")
    hidden_dim: int = Field(256, ge=1, description="d_h of the painter's recurrent state")
    image_size: int = Field(32, ge=4, description="H = W of the canvas")
    plane_size: int = Field(16, ge=1, description="side of the low-resolution r/g/b planes")
    channels: int = Field(32, ge=1, description="feature width of the upscaling stack")


class DiscriminatorConfig(_Section):
    base_channels: int = Field(32, ge=1)
    leaky_slope: float = Field(0.2, ge=0)


class TrainingConfig(_Section):
    steps: int = Field(5000, ge=1)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(2e-4, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    kl_weight: float = Field(2.0, ge=0, description="lambda_KL on the conditioning KL term")
    kl_per_dim: bool = Field(True, description="divide the conditioning KL by cond_dim in the generator loss")
    bce_eps: float = Field(1e-7, gt=0, lt=0.5)
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)


class DataConfig(_Section):
    source: Literal["synthetic", "manifest"] = "synthetic"
    manifest_path: str | None = None
    image_size: int = Field(32, ge=4)
    colors: list[str] = Field(default_factory=lambda: ["red", "green", "blue", "yellow"])
    shapes: list[str] = Field(default_factory=lambda: ["circle", "square", "triangle"])
    backgrounds: list[str] = Field(default_factory=lambda: ["gray", "white", "black"])
    samples_per_class: int = Field(200, ge=1)
    holdout_fraction: float = Field(0.1, ge=0, lt=1)
    workers: int = Field(1, ge=1, description="threads used by the synthetic rasterizer")


class MetricsConfig(_Section):
    splits: int = Field(10, ge=1)
    num_samples: int = Field(500, ge=1, description="generated images scored by eval")
    recall_ks: list[int] = Field(default_factory=lambda: [1, 5])
    recall_rounds: int = Field(50, ge=1, description="one-pair-per-class groups averaged by eval")
    classifier_epochs: int = Field(20, ge=1)
    classifier_target_accuracy: float = Field(0.95, gt=0, le=1)


class RunConfig(_Section):
    """Root config: every section plus the root seed and output directory."""
    seed: int = 0
    out_dir: str = Field(default_factory=_default_out_dir)
    vse: VSEConfig = Field(default_factory=VSEConfig)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        g = self.generator
        if g.image_size != self.data.image_size:
            raise ValueError(
                f"generator.image_size={g.image_size} != data.image_size={self.data.image_size}"
            )
        if g.image_size % g.plane_size or not _is_power_of_two(g.image_size // g.plane_size):
            raise ValueError(
                f"generator.image_size={g.image_size} must be plane_size={g.plane_size} times a power of two"
            )
        if not _is_power_of_two(g.image_size) or g.image_size < 8:
            raise ValueError(f"image size {g.image_size} must be a power of two >= 8")
        if self.data.source == "manifest" and not self.data.manifest_path:
            raise ValueError("data.source=manifest requires data.manifest_path")
        return self


# ---------------------------------------------------------------------------
# Flat key-value format
# ---------------------------------------------------------------------------

def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _format_value(value: Any) -> str:
    if isinstance(value, str):
        # Quote strings that would otherwise come back as another type.
        try:
            json.loads(value)
        except json.JSONDecodeError:
            return value
        return json.dumps(value)
    return json.dumps(value)


def parse_flat(text: str) -> dict[str, Any]:
    """Parse ``key=value`` lines into a flat dict (later keys win)."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        out[key.strip()] = _parse_value(value)
    return out


def _flatten(data: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def _nest(flat: dict[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key {key!r} collides with scalar {part!r}")
            node = child
        node[parts[-1]] = value
    return nested


def dump_flat(cfg: RunConfig) -> str:
    """Serialize to sorted ``key=value`` lines."""
    flat = _flatten(cfg.model_dump())
    return "".join(f"{k}={_format_value(flat[k])}\n" for k in sorted(flat))


def build_config(flat: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    base: RunConfig | None = None,
) -> RunConfig:
    """Load a config file (optional) and apply overrides on top of it.

    Precedence: overrides > file > ``base`` (or the defaults).
    """
    flat: dict[str, Any] = _flatten(base.model_dump()) if base is not None else {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        flat.update(parse_flat(p.read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        flat[key] = _parse_value(value) if isinstance(value, str) else value
    cfg = build_config(flat)
    logger.debug("Loaded config (%d explicit keys)", len(flat))
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dump_flat(cfg), encoding="utf-8")
    return p


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def subsystem_seed(root: int, name: str) -> int:
    """Derive an independent 32-bit seed for one subsystem from the root seed."""
    seq = np.random.SeedSequence(entropy=int(root) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
