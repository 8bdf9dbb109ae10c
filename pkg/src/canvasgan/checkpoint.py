"""Checkpoint directories: named parameter arrays + config echo + vocabulary.

Layout::

    ckpt_<step>/
        params.bin    zip (stored, fixed timestamps) of <module>.<param>.npy members
        config.json   {"step": ..., "config": RunConfig dump}
        vocab.json    {"tokens": [...]}

Every file is written atomically and byte-identically for identical content,
so save → load → save reproduces the same bytes.
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from canvasgan.config import RunConfig
from canvasgan.errors import ConfigMismatch, CorruptFile
from canvasgan.vse import Vocabulary

logger = logging.getLogger(__name__)

PARAMS_FILE = "params.bin"
CONFIG_FILE = "config.json"
VOCAB_FILE = "vocab.json"

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: RunConfig
    vocab: Vocabulary
    step: int | None
    path: Path


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp", prefix=f".{path.name}_")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, str(path))
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def collect_params(modules: Mapping[str, nn.Module]) -> dict[str, np.ndarray]:
    """Flatten module state dicts into ``<module>.<param>`` numpy arrays."""
    params: dict[str, np.ndarray] = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            params[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    return params


def pack_params(params: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays into a stored (uncompressed) zip of ``.npy`` members.

    Members are written in sorted name order with a fixed timestamp, so equal
    parameters always produce identical bytes.
    """
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            member = io.BytesIO()
            np.save(member, np.ascontiguousarray(params[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, member.getvalue())
    return buf.getvalue()


def unpack_params(data: bytes) -> dict[str, np.ndarray]:
    """Inverse of ``pack_params``; any damage surfaces as ``CorruptFile``."""
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            out = {}
            for name in zf.namelist():
                if not name.endswith(".npy"):
                    raise CorruptFile(f"unexpected member {name!r} in params archive")
                out[name[: -len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            return out
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as exc:
        raise CorruptFile(f"unreadable params archive: {exc}") from exc


def architecture_echo(cfg: RunConfig) -> dict:
    """The config fields that decide parameter shapes."""
    return {
        "image_size": cfg.data.image_size,
        "vse": cfg.vse.model_dump(include={"word_dim", "hidden_dim", "image_channels"}),
        "generator": cfg.generator.model_dump(),
        "discriminator": cfg.discriminator.model_dump(),
    }


def save_checkpoint(
    path: str | Path,
    modules: Mapping[str, nn.Module],
    cfg: RunConfig,
    vocab: Vocabulary,
    step: int | None = None,
) -> Path:
    return save_params(path, collect_params(modules), cfg, vocab, step)


def save_params(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    cfg: RunConfig,
    vocab: Vocabulary,
    step: int | None = None,
) -> Path:
    path = Path(path)
    echo = {"step": step, "config": cfg.model_dump(mode="json")}
    atomic_write(path / PARAMS_FILE, pack_params(params))
    atomic_write(path / CONFIG_FILE, json.dumps(echo, indent=2, sort_keys=True).encode("utf-8"))
    atomic_write(path / VOCAB_FILE, vocab.to_json().encode("utf-8"))
    logger.info("Saved checkpoint %s (%d arrays)", path, len(params))
    return path


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> Checkpoint:
    """Load a checkpoint; if ``cfg`` is given its architecture must match the echo."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {path}")
    for name in (PARAMS_FILE, CONFIG_FILE, VOCAB_FILE):
        if not (path / name).is_file():
            raise CorruptFile(f"checkpoint {path} is missing {name}")
    try:
        echo = json.loads((path / CONFIG_FILE).read_text(encoding="utf-8"))
        saved_cfg = RunConfig.model_validate(echo["config"])
        vocab = Vocabulary.from_json((path / VOCAB_FILE).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CorruptFile(f"unreadable checkpoint metadata in {path}: {exc}") from exc
    if cfg is not None and architecture_echo(cfg) != architecture_echo(saved_cfg):
        raise ConfigMismatch(
            f"checkpoint {path} was saved with {architecture_echo(saved_cfg)}, "
            f"requested {architecture_echo(cfg)}"
        )
    params = unpack_params((path / PARAMS_FILE).read_bytes())
    return Checkpoint(params=params, config=saved_cfg, vocab=vocab, step=echo.get("step"), path=path)


def restore_module(module: nn.Module, params: Mapping[str, np.ndarray], prefix: str) -> nn.Module:
    """Copy ``<prefix>.*`` arrays into ``module`` (strict)."""
    head = f"{prefix}."
    state = {k[len(head):]: torch.from_numpy(np.array(v)) for k, v in params.items() if k.startswith(head)}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptFile(f"checkpoint arrays for {prefix!r} do not fit the model: {exc}") from exc
    return module
