"""Relight a reconstructed sphere under a light the capture never used.

Estimates per-point reflectance, then renders the point cloud from the first
camera with a white point light off to the side. Writes a PFM image.
"""

from _common import run, workdir

SMALL = ["--set", "cam_size=[320,240]", "--set", "cam_focal=400", "--set", "proj_size=[64,48]"]

root = workdir(__doc__)
run("synth", "--preset", "sphere", "--out", root / "cap", *SMALL)
run("reconstruct", root / "cap", "--out", root / "rec")
run("spectra", root / "cap", root / "rec", "--out", root / "spec")
run(
    "relight", root / "spec",
    "--light", "2", "-2", "1.5", "white",
    "--capture", root / "cap", "--reconstruction", root / "rec", "--view", "cam0",
    "--out", root / "relit.pfm",
)
print("image written to", root / "relit.pfm")
