"""Shading-aware spectra versus a shading-blind single-pair baseline.

A 24-patch chart is lit by projectors at different distances and angles.
Ignoring the geometric shading term leaves each patch's estimate scaled and
mixed by the illumination falloff; modelling it removes most of that error.
"""

import json

from _common import run, workdir

root = workdir(__doc__)
run("synth", "--preset", "colorchart", "--out", root / "cap")
run("reconstruct", root / "cap", "--out", root / "rec")
run("spectra", root / "cap", root / "rec", "--out", root / "ours")
run("spectra", root / "cap", root / "rec", "--baseline", "0", "--out", root / "base")
scores = {}
for name in ("ours", "base"):
    run("eval", root / "cap", root / "rec", "--spectra", root / name, "--out", root / f"{name}.json")
    scores[name] = json.loads((root / f"{name}.json").read_text())["patch_rmse_mean"]

print(f"mean patch RMSE  shading-aware {scores['ours']:.4f}  baseline {scores['base']:.4f}")
