"""Shared helpers for the demo scripts."""

import argparse
import tempfile
from pathlib import Path

from spectrascan.cli import EXIT_OK, main


def workdir(description: str) -> Path:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--workdir", type=Path, default=None, help="keep outputs here (default: a temp dir)")
    args = ap.parse_args()
    if args.workdir is None:
        return Path(tempfile.mkdtemp(prefix="spectrascan-demo-"))
    args.workdir.mkdir(parents=True, exist_ok=True)
    return args.workdir


def run(*argv) -> None:
    print("$ spectrascan", " ".join(map(str, argv)))
    code = main([str(a) for a in argv])
    if code != EXIT_OK:
        raise SystemExit(code)
    print()
