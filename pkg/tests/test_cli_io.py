import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spectrascan.cli import EXIT_OK, EXIT_USAGE, main
from spectrascan.config import DEFAULTS, load_config
from spectrascan.errors import ConfigurationError
from spectrascan.imageio import read_pfm
from spectrascan.recon_io import load_reconstruction, quaternion_wxyz, rotation_from_wxyz
from spectrascan.sfm.bundle import so3_exp

PROPS = settings(max_examples=1000, deadline=None)

SMALL = ["--set", "cam_size=[320,240]", "--set", "cam_focal=400", "--set", "proj_size=[64,48]"]


# --- config ---------------------------------------------------------------------------


def test_config_defaults():
    cfg = load_config()
    assert cfg == DEFAULTS and cfg is not DEFAULTS
    assert cfg["w_p"] == 100.0 and cfg["gamma"] == 0.06 and cfg["merge_threshold_px"] == 0.5


def test_config_layers(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"gamma": 0.2, "w_p": 10}))
    cfg = load_config(p, {"w_p": 50.0, "seed": None})
    assert cfg["gamma"] == 0.2 and cfg["w_p"] == 50.0 and cfg["seed"] == 0


@pytest.mark.parametrize("override", [{"gamma": -1}, {"w_p": 0.5}, {"threads": 0}, {"nonsense": 1}])
def test_config_rejects(override):
    with pytest.raises(ConfigurationError):
        load_config(None, override)


def test_config_unreadable(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.json")


@PROPS
@given(arrays(float, 3, elements=st.floats(-3.1, 3.1)))
def test_quaternion_round_trip(w):
    R = so3_exp(w)
    q = quaternion_wxyz(R)
    assert q[0] >= 0 and np.linalg.norm(q) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(rotation_from_wxyz(q), R, atol=1e-12)


# --- command line ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small sphere capture taken through synth, reconstruct and spectra."""
    root = tmp_path_factory.mktemp("cli")
    cap, rec, spec = root / "cap", root / "rec", root / "spec"
    codes = [
        main(["synth", "--preset", "sphere", "--out", str(cap), *SMALL]),
        main(["reconstruct", str(cap), "--out", str(rec)]),
        main(["spectra", str(cap), str(rec), "--out", str(spec)]),
    ]
    return root, codes


def test_round_trip(pipeline, capsys):
    root, codes = pipeline
    assert codes == [EXIT_OK] * 3
    recon = load_reconstruction(root / "rec")
    assert len(recon.registered) == 9 and len(recon.points) > 1000
    assert main(["eval", str(root / "cap"), str(root / "rec"), "--spectra", str(root / "spec"), "--out", str(root / "eval.json")]) == EXIT_OK
    report = json.loads((root / "eval.json").read_text())
    assert report["point_rms"] < 5e-3
    assert report["spectra"]["n_estimated"] > 0.8 * report["spectra"]["n_points"]
    out = root / "relit.pfm"
    assert main(["relight", str(root / "spec"), "--light", "0", "-2", "2", "white", "--capture", str(root / "cap"), "--out", str(out)]) == EXIT_OK
    img = read_pfm(out)
    assert img.shape == (480, 640, 3) and img.max() > 0


def test_reconstruction_file_round_trip(pipeline):
    root, _ = pipeline
    a = load_reconstruction(root / "rec")
    doc = json.loads((root / "rec" / "reconstruction.json").read_text())
    assert doc["n_points"] == len(a.points)
    for vid, v in a.views.items():
        q = doc["views"][vid]["quaternion_wxyz"]
        np.testing.assert_allclose(v.pose.rotation, rotation_from_wxyz(q), atol=1e-15)


def test_same_seed_same_manifest(tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        assert main(["synth", "--preset", "sphere", "--seed", "7", "--out", str(tmp_path / name), *SMALL]) == EXIT_OK
        hashes.append([ln for ln in capsys.readouterr().out.splitlines() if "sha256" in ln][0])
    assert hashes[0] == hashes[1]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_missing_preset_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["synth", "--preset", "teapot", "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_reconstruction(pipeline, tmp_path, capsys):
    root, _ = pipeline
    assert main(["spectra", str(root / "cap"), str(tmp_path / "nope"), "--out", str(tmp_path / "s")]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_not_a_capture(tmp_path, capsys):
    assert main(["reconstruct", str(tmp_path), "--out", str(tmp_path / "r")]) == EXIT_USAGE


@pytest.mark.parametrize("k", ["0", "22", "3-30"])
def test_band_k_out_of_range(pipeline, tmp_path, k, capsys):
    root, _ = pipeline
    assert main(["bandselect", str(root / "cap"), str(root / "rec"), "--k", k, "--out", str(tmp_path)]) == EXIT_USAGE


def test_relight_without_light(pipeline, tmp_path, capsys):
    root, _ = pipeline
    assert main(["relight", str(root / "spec"), "--out", str(tmp_path / "x.pfm")]) == EXIT_USAGE
