"""Figure output: attention heat maps and loss curves saved as PNG files.

Every figure written through ``save_figure`` is also indexed in the
directory's ``metadata.json``::

    out/
        attention_000.png
        loss_curves.png
        metadata.json   # {"figures": [{"id", "title", "file", "created_at", "width", "height"}], ...}
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence, TypedDict

import numpy as np
import pandas as pd
from PIL import Image

from canvasgan.checkpoint import atomic_write
from canvasgan.data import to_uint8
from canvasgan.trace import TraceStep

logger = logging.getLogger(__name__)

METADATA_FILE = "metadata.json"

_mpl_cfg = os.path.join(tempfile.gettempdir(), "canvasgan_mplconfig")
os.makedirs(_mpl_cfg, exist_ok=True)
os.environ.setdefault("MPLCONFIGDIR", _mpl_cfg)

import matplotlib  # noqa: E402

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import seaborn as sns  # noqa: E402


class FigureMetadata(TypedDict):
    id: str
    title: str
    file: str
    created_at: str
    width: int | None
    height: int | None


def _load_metadata(directory: Path) -> dict:
    meta_path = directory / METADATA_FILE
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as f:
            return json.load(f)
    return {"figures": [], "updated_at": None}


def save_figure(fig, path: str | Path, title: str = "") -> FigureMetadata:
    """Render ``fig`` to PNG at ``path``, close it and index it in metadata.json."""
    path = Path(path)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, bbox_inches="tight", facecolor="white",
                metadata={"Software": None})
    plt.close(fig)
    data = buf.getvalue()
    atomic_write(path, data)

    with Image.open(io.BytesIO(data)) as img:
        width, height = img.size
    now = datetime.now(timezone.utc).isoformat()
    entry: FigureMetadata = {
        "id": path.stem,
        "title": title,
        "file": path.name,
        "created_at": now,
        "width": width,
        "height": height,
    }
    meta = _load_metadata(path.parent)
    meta["figures"] = [f for f in meta["figures"] if f.get("file") != path.name] + [entry]
    meta["updated_at"] = now
    atomic_write(path.parent / METADATA_FILE,
                 json.dumps(meta, ensure_ascii=False, indent=2).encode("utf-8"))
    logger.info("Saved figure %s", path)
    return entry


# ---------------------------------------------------------------------------
# Attention maps
# ---------------------------------------------------------------------------

def attention_matrix(steps: Sequence[TraceStep]) -> np.ndarray:
    """t × n matrix of per-timestep word weights."""
    return np.array([s.beta for s in steps], dtype=np.float64)


def render_attention_map(
    steps: Sequence[TraceStep],
    out_path: str | Path,
    image: np.ndarray | None = None,
    title: str = "",
) -> np.ndarray:
    """Heat map of β (rows: timesteps, columns: tokens), optionally beside the image.

    Returns the rendered matrix.
    """
    matrix = attention_matrix(steps)
    tokens = steps[0].token_strings
    t, n = matrix.shape

    if image is not None:
        fig, (ax_img, ax) = plt.subplots(
            1, 2, figsize=(3 + 0.6 * n, 0.5 * t + 2), gridspec_kw={"width_ratios": [1, max(n / 3, 1.5)]}
        )
        ax_img.imshow(to_uint8(image))
        ax_img.set_axis_off()
    else:
        fig, ax = plt.subplots(figsize=(1 + 0.6 * n, 0.5 * t + 1.5))

    sns.heatmap(
        matrix,
        ax=ax,
        vmin=0.0,
        vmax=1.0,
        cmap="viridis",
        xticklabels=tokens,
        yticklabels=[f"t={s.timestep}" for s in steps],
        cbar=True,
        square=False,
    )
    ax.set_xlabel("token")
    ax.set_ylabel("timestep")
    ax.tick_params(axis="x", rotation=60)
    if title:
        fig.suptitle(title)
    save_figure(fig, out_path, title=title or "attention")
    return matrix


# ---------------------------------------------------------------------------
# Loss curves
# ---------------------------------------------------------------------------

def plot_loss_curves(losses: pd.DataFrame | str | Path, out_path: str | Path) -> Path:
    """Generator loss on top, the three discriminator terms below."""
    df = losses if isinstance(losses, pd.DataFrame) else pd.read_csv(losses)
    fig, (ax_g, ax_d) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    ax_g.plot(df["step"], df["g_loss"], linewidth=1.2, label="generator")
    ax_g.set_ylabel("loss")
    ax_g.legend(loc="upper right")
    ax_g.grid(True, alpha=0.3)
    for column, label in (("d_match", "matching"), ("d_mismatch", "mismatching"),
                          ("d_relevant", "relevant")):
        ax_d.plot(df["step"], df[column], linewidth=1.0, label=label)
    ax_d.set_xlabel("step")
    ax_d.set_ylabel("loss")
    ax_d.legend(loc="upper right")
    ax_d.grid(True, alpha=0.3)
    fig.tight_layout()
    save_figure(fig, out_path, title="losses")
    return Path(out_path)
