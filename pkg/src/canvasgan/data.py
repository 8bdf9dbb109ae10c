"""Datasets: a seeded synthetic coloured-shapes set and a TSV manifest loader.

Synthetic samples are one coloured shape on a neutral background with a
templated caption such as ``"a red circle on a gray background"``. Every
sample is rendered from its own derived seed, so the content is a pure
function of (config, seed) no matter how many workers render it.

Manifests are UTF-8 TSV files, one ``relative_image_path<TAB>caption`` per
line, paths relative to the manifest's directory.

Images are float32 H × W × 3 arrays in [-1, 1]; PNG (8-bit) only at the
boundaries.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from canvasgan.config import DataConfig, RunConfig, subsystem_seed
from canvasgan.errors import ConfigError, MalformedLine, MissingImage

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}

BACKGROUNDS: dict[str, float] = {
    "gray": 0.5,
    "white": 0.9,
    "black": 0.1,
}

_TEMPLATES = (
    "a {color} {shape} on a {bg} background",
    "a {color} {shape} sitting on a {bg} background",
    "there is a {color} {shape} on a {bg} background",
    "{color} {shape} over a {bg} background",
)

_SHAPE_WORDS: dict[str, tuple[str, ...]] = {
    "circle": ("circle", "disc", "round blob"),
    "square": ("square", "box", "block"),
    "triangle": ("triangle", "wedge"),
}


@dataclass
class Sample:
    image: np.ndarray        # (H, W, 3) float32 in [-1, 1]
    caption: str
    class_id: int | None = None
    color: str | None = None
    shape: str | None = None


# ---------------------------------------------------------------------------
# Rasterizers: (size, cx, cy, radius) -> boolean mask
# ---------------------------------------------------------------------------

Rasterizer = Callable[[int, float, float, float], np.ndarray]


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    return xs, ys


def raster_circle(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    xs, ys = _grid(size)
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def raster_square(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    xs, ys = _grid(size)
    half = 0.85 * r
    return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)


def raster_triangle(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    # apex up; rows grow downward
    xs, ys = _grid(size)
    top, bottom = cy - r, cy + r
    half_width = r * (ys - top) / (bottom - top)
    return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= half_width)


SHAPES: dict[str, Rasterizer] = {
    "circle": raster_circle,
    "square": raster_square,
    "triangle": raster_triangle,
}


@dataclass
class SynthConfig:
    colors: list[tuple[str, tuple[float, float, float]]]
    shapes: list[tuple[str, Rasterizer]]
    size: int = 32
    samples_per_class: int = 200
    seed: int = 0
    backgrounds: list[tuple[str, float]] = field(
        default_factory=lambda: list(BACKGROUNDS.items())
    )
    workers: int = 1

    def __post_init__(self) -> None:
        if len(self.colors) < 2 or len(self.shapes) < 2:
            raise ValueError("synthetic set needs at least 2 colours and 2 shapes")
        if not self.backgrounds:
            raise ValueError("synthetic set needs at least one background")

    @property
    def num_classes(self) -> int:
        return len(self.colors) * len(self.shapes)

    @classmethod
    def from_config(cls, cfg: DataConfig, seed: int) -> "SynthConfig":
        unknown = [c for c in cfg.colors if c not in PALETTE]
        unknown += [s for s in cfg.shapes if s not in SHAPES]
        unknown += [b for b in cfg.backgrounds if b not in BACKGROUNDS]
        if unknown:
            raise ConfigError(f"unknown synthetic vocabulary: {unknown}")
        return cls(
            colors=[(c, PALETTE[c]) for c in cfg.colors],
            shapes=[(s, SHAPES[s]) for s in cfg.shapes],
            size=cfg.image_size,
            samples_per_class=cfg.samples_per_class,
            seed=seed,
            backgrounds=[(b, BACKGROUNDS[b]) for b in cfg.backgrounds],
            workers=cfg.workers,
        )


def _render(cfg: SynthConfig, class_id: int, item: int) -> Sample:
    color_idx, shape_idx = divmod(class_id, len(cfg.shapes))
    color, rgb = cfg.colors[color_idx]
    shape, raster = cfg.shapes[shape_idx]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, class_id, item]))

    bg_name, bg_level = cfg.backgrounds[int(rng.integers(len(cfg.backgrounds)))]
    size = cfg.size
    r = size * float(rng.uniform(0.2, 0.32))
    cx = float(rng.uniform(r, size - r))
    cy = float(rng.uniform(r, size - r))

    pixels = np.full((size, size, 3), bg_level, dtype=np.float32)
    pixels[raster(size, cx, cy, r)] = np.asarray(rgb, dtype=np.float32)
    image = pixels * 2.0 - 1.0

    words = _SHAPE_WORDS.get(shape, (shape,))
    template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    caption = template.format(color=color, shape=words[int(rng.integers(len(words)))], bg=bg_name)
    return Sample(image=image, caption=caption, class_id=class_id, color=color, shape=shape)


def generate_synthetic(cfg: SynthConfig) -> list[Sample]:
    """Render every (colour, shape) class ``samples_per_class`` times, class-major."""
    jobs = [(k, i) for k in range(cfg.num_classes) for i in range(cfg.samples_per_class)]
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            samples = list(pool.map(lambda job: _render(cfg, *job), jobs))
    else:
        samples = [_render(cfg, k, i) for k, i in jobs]
    logger.info("Generated %d synthetic samples over %d classes", len(samples), cfg.num_classes)
    return samples


# ---------------------------------------------------------------------------
# PNG boundary
# ---------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] float → [0, 255] uint8."""
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """[0, 255] uint8 → [-1, 1] float32."""
    return (pixels.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def save_png(image: np.ndarray, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(p, format="PNG")
    return p


def load_png(path: str | Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return from_uint8(np.asarray(img))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def load_manifest(path: str | Path, image_size: int = 32) -> list[Sample]:
    path = Path(path)
    if not path.is_file():
        raise MissingImage(f"manifest not found: {path}")
    root = path.parent
    samples: list[Sample] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        rel, sep, caption = line.partition("\t")
        if not sep:
            raise MalformedLine(lineno, "no TAB separator")
        if not rel.strip() or not caption.strip():
            raise MalformedLine(lineno, "empty path or caption")
        img_path = root / rel.strip()
        if not img_path.is_file():
            raise MissingImage(f"{path}:{lineno}: image not found: {img_path}")
        samples.append(Sample(image=load_png(img_path, image_size), caption=caption.strip()))
    logger.info("Loaded %d samples from %s", len(samples), path)
    return samples


def write_manifest(dataset: Sequence[Sample], directory: str | Path) -> Path:
    """Write PNGs under ``images/`` plus ``manifest.tsv``; returns the manifest path."""
    directory = Path(directory)
    lines = []
    for i, sample in enumerate(dataset):
        rel = f"images/{i:05d}.png"
        save_png(sample.image, directory / rel)
        lines.append(f"{rel}\t{sample.caption}\n")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# Dataset helpers
# ---------------------------------------------------------------------------

def load_dataset(cfg: RunConfig) -> list[Sample]:
    if cfg.data.source == "manifest":
        return load_manifest(cfg.data.manifest_path, cfg.data.image_size)
    synth = SynthConfig.from_config(cfg.data, seed=subsystem_seed(cfg.seed, "data"))
    return generate_synthetic(synth)


def split_holdout(dataset: Sequence[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Deterministic (train, held-out) split; both keep dataset order."""
    n_hold = int(round(len(dataset) * fraction))
    order = np.random.default_rng(seed).permutation(len(dataset))
    held = set(order[:n_hold].tolist())
    train = [s for i, s in enumerate(dataset) if i not in held]
    hold = [s for i, s in enumerate(dataset) if i in held]
    return train, hold


def images_to_tensor(dataset: Sequence[Sample]) -> torch.Tensor:
    """(N, 3, H, W) float32 tensor."""
    stacked = np.stack([s.image for s in dataset]).astype(np.float32)
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(batch: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) tensor → (N, H, W, 3) float32 array."""
    return batch.detach().to(torch.float32).permute(0, 2, 3, 1).cpu().numpy()


def dominant_channel(image: np.ndarray) -> int:
    # 0 = red, 1 = green, 2 = blue
    return int(np.argmax(np.asarray(image).reshape(-1, 3).mean(axis=0)))


def dominant_color(image: np.ndarray, palette: Sequence[str] | None = None) -> str:
    """Palette name whose hue best matches the image's centred channel means.

    Neutral backgrounds add the same amount to each channel, so centring the
    three means leaves only the chromatic part of the foreground.
    """
    names = list(palette or PALETTE)
    means = np.asarray(image, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    centred = means - means.mean()
    best, best_score = names[0], -np.inf
    for name in names:
        ref = np.asarray(PALETTE[name], dtype=np.float64)
        ref = ref - ref.mean()
        score = float(centred @ ref) / (np.linalg.norm(ref) * (np.linalg.norm(centred) + 1e-12))
        if score > best_score:
            best, best_score = name, score
    return best
