"""Shared fixtures. Rendered scenes and reconstructions are cached per session."""

from __future__ import annotations

import numpy as np
import pytest

from spectrascan.datasets import default_basis, load_camera_sensitivity, projector_illuminants
from spectrascan.spectral_model import WavelengthGrid


@pytest.fixture(scope="session")
def grid():
    return WavelengthGrid()


@pytest.fixture(scope="session")
def sens(grid):
    return load_camera_sensitivity(grid)


@pytest.fixture(scope="session")
def illum(grid):
    return projector_illuminants(grid)


@pytest.fixture(scope="session")
def basis(grid):
    return default_basis(grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob_scene():
    from spectrascan.synth import build_scene

    return build_scene("blob")


@pytest.fixture(scope="session")
def blob_capture(blob_scene):
    from spectrascan.synth import render_capture

    return render_capture(blob_scene)


@pytest.fixture(scope="session")
def blob_features(blob_capture):
    from spectrascan.sfm import capture_features

    return capture_features(blob_capture)


@pytest.fixture(scope="session")
def blob_reconstruction(blob_capture, blob_features):
    """``(state, log, tracks, seconds)`` of the default noiseless rig."""
    import time

    from spectrascan.sfm import reconstruct_capture

    t0 = time.perf_counter()
    state, logbook, tracks = reconstruct_capture(blob_capture, features=blob_features)
    return state, logbook, tracks, time.perf_counter() - t0


@pytest.fixture(scope="session")
def chart_scene():
    from spectrascan.synth import build_scene

    return build_scene("colorchart")


@pytest.fixture(scope="session")
def chart_capture(chart_scene):
    from spectrascan.synth import render_capture

    return render_capture(chart_scene)


@pytest.fixture(scope="session")
def chart_reconstruction(chart_capture):
    from spectrascan.sfm import reconstruct_capture

    state, logbook, tracks = reconstruct_capture(chart_capture)
    return state, logbook, tracks


# --- acceptance summary -------------------------------------------------------------

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Call ``report(n, ok, detail)`` to add one summary line per criterion."""

    def report(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
