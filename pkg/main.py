#!/usr/bin/env python3
"""Local entry point: ``python main.py <subcommand> ...`` without installing the package."""

from __future__ import annotations

import os
import sys

# Ensure the src directory is in the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))


def main() -> int:
    from canvasgan.cli import main as cli_main

    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
