"""Paint traces: per-timestep attention and gate records for one generated image.

File layout (JSON)::

    {
      "caption": "a red circle on a gray background",
      "image": "sample_000.png",
      "steps": [
        {"timestep": 1, "beta": [...], "gamma": 0.42, "token_strings": [...]},
        ...
      ]
    }

Timesteps are 1-based. ``beta`` and ``token_strings`` have one entry per
caption token. A bare list of step objects is accepted on read.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

from canvasgan.checkpoint import atomic_write
from canvasgan.errors import MalformedTrace
from canvasgan.generator import PaintResult

logger = logging.getLogger(__name__)

BETA_SUM_TOL = 1e-5


@dataclass
class TraceStep:
    timestep: int
    beta: list[float]
    gamma: float
    token_strings: list[str]


@dataclass
class PaintTraceFile:
    steps: list[TraceStep]
    caption: str | None = None
    image: str | None = None

    @property
    def tokens(self) -> list[str]:
        return self.steps[0].token_strings

    def to_dict(self) -> dict[str, Any]:
        return {
            "caption": self.caption,
            "image": self.image,
            "steps": [asdict(s) for s in self.steps],
        }


def trace_records(result: PaintResult, tokens: Sequence[str], item: int = 0) -> list[TraceStep]:
    """Pull batch row ``item`` out of a paint result, cut to the caption's real tokens."""
    n = len(tokens)
    steps = []
    for i, rec in enumerate(result.trace, start=1):
        beta = rec.beta[item, :n].detach().to("cpu").double().tolist()
        steps.append(TraceStep(
            timestep=i,
            beta=[float(b) for b in beta],
            gamma=float(rec.gamma[item].reshape(-1)[0]),
            token_strings=list(tokens),
        ))
    return steps


def write_trace(path: str | Path, steps: Sequence[TraceStep], caption: str | None = None,
                image: str | None = None) -> Path:
    path = Path(path)
    doc = PaintTraceFile(steps=list(steps), caption=caption, image=image)
    atomic_write(path, (json.dumps(doc.to_dict(), indent=2) + "\n").encode("utf-8"))
    return path


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedTrace(f"{where}: expected a finite number, got {value!r}")
    return float(value)


def parse_step(raw: Any, index: int) -> TraceStep:
    where = f"step {index}"
    if not isinstance(raw, dict):
        raise MalformedTrace(f"{where}: expected an object")
    missing = {"timestep", "beta", "gamma", "token_strings"} - raw.keys()
    if missing:
        raise MalformedTrace(f"{where}: missing {sorted(missing)}")
    timestep = raw["timestep"]
    if isinstance(timestep, bool) or not isinstance(timestep, int):
        raise MalformedTrace(f"{where}: timestep must be an integer")
    beta, tokens = raw["beta"], raw["token_strings"]
    if not isinstance(beta, list) or not beta:
        raise MalformedTrace(f"{where}: beta must be a non-empty list")
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise MalformedTrace(f"{where}: token_strings must be a list of strings")
    if len(tokens) != len(beta):
        raise MalformedTrace(f"{where}: {len(beta)} weights for {len(tokens)} tokens")
    weights = [_number(b, f"{where} beta") for b in beta]
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > BETA_SUM_TOL:
        raise MalformedTrace(f"{where}: beta is not a distribution (sum {sum(weights)!r})")
    gamma = _number(raw["gamma"], f"{where} gamma")
    if not 0.0 <= gamma <= 1.0:
        raise MalformedTrace(f"{where}: gamma {gamma} outside [0, 1]")
    return TraceStep(timestep=timestep, beta=weights, gamma=gamma, token_strings=tokens)


def read_trace(path: str | Path) -> PaintTraceFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except UnicodeDecodeError as exc:
        raise MalformedTrace(f"{path}: not UTF-8 text: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedTrace(f"{path}: not valid JSON: {exc}") from exc

    if isinstance(doc, list):
        raw_steps, caption, image = doc, None, None
    elif isinstance(doc, dict) and isinstance(doc.get("steps"), list):
        raw_steps, caption, image = doc["steps"], doc.get("caption"), doc.get("image")
    else:
        raise MalformedTrace(f"{path}: expected a list of steps or an object with 'steps'")
    if not raw_steps:
        raise MalformedTrace(f"{path}: trace has no steps")

    steps = [parse_step(raw, i) for i, raw in enumerate(raw_steps)]
    if [s.timestep for s in steps] != list(range(1, len(steps) + 1)):
        raise MalformedTrace(f"{path}: timesteps must run 1..{len(steps)} in order")
    if any(s.token_strings != steps[0].token_strings for s in steps):
        raise MalformedTrace(f"{path}: token_strings differ between steps")
    logger.debug("Read trace %s: %d steps x %d tokens", path, len(steps), len(steps[0].beta))
    return PaintTraceFile(steps=steps, caption=caption, image=image)
