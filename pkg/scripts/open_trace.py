#!/usr/bin/env python3
"""Open and pretty-print a paint trace written by ``canvasgan sample``.

Usage:
  python scripts/open_trace.py --latest --out runs
  python scripts/open_trace.py path/to/sample_000.json
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from canvasgan.errors import MalformedTrace  # noqa: E402
from canvasgan.trace import read_trace  # noqa: E402


def latest_trace_file(out_dir: Path) -> Path | None:
    d = out_dir / "samples"
    if not d.exists():
        return None
    files = sorted(d.glob("*.json"), key=lambda p: p.stat().st_mtime, reverse=True)
    return files[0] if files else None


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("trace", nargs="?", help="trace JSON file")
    ap.add_argument("--latest", action="store_true", help="open the newest trace under <out>/samples")
    ap.add_argument("--out", type=str, default="runs", help="run output directory")
    args = ap.parse_args()

    if args.latest:
        p = latest_trace_file(Path(args.out))
        if not p:
            raise SystemExit("No traces found.")
    elif args.trace:
        p = Path(args.trace)
    else:
        raise SystemExit("Provide a trace path or --latest")

    if not p.exists():
        raise SystemExit(f"Trace file not found: {p}")
    try:
        doc = read_trace(p)
    except MalformedTrace as exc:
        raise SystemExit(f"Malformed trace: {exc}")

    print(f"TRACE: {p}")
    print(f"caption: {doc.caption}")
    print(f"image:   {doc.image}")
    print("=" * 100)
    width = max(len(t) for t in doc.tokens)
    for step in doc.steps:
        top = max(range(len(step.beta)), key=step.beta.__getitem__)
        print(f"[t={step.timestep}] gamma={step.gamma:.4f} focus={doc.tokens[top]!r}")
        for token, weight in zip(doc.tokens, step.beta):
            bar = "#" * int(round(weight * 40))
            print(f"  {token:<{width}} {weight:6.3f} {bar}")


if __name__ == "__main__":
    main()
