"""Which illuminant/channel bands matter most on the chart?

Searches every subset of the 21 bands for sizes 1 to 6 and reports how close
the best small subsets come to using all of them.
"""

import json

from _common import run, workdir

root = workdir(__doc__)
run("synth", "--preset", "colorchart", "--out", root / "cap")
run("reconstruct", root / "cap", "--out", root / "rec")
run("bandselect", root / "cap", root / "rec", "--k", "1-6,21", "--out", root / "bands")

result = json.loads((root / "bands" / "bandselect.json").read_text())
for r in result["results"]:
    ratio = r["rmse"] / result["full_rmse"]
    print(f"k={r['k']:2d}  rmse {r['rmse']:.4f}  ({ratio:.2f}x all bands)  {', '.join(r['bands'])}")
