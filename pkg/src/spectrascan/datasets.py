"""Bundled spectral tables, resampled onto a caller's wavelength grid.

The CSVs under ``data/`` are tabulated at 5 nm from 380 to 780 nm:

* ``cie1931_2deg.csv`` - CIE 1931 2-degree colour matching functions.
* ``colorchecker_babelcolor.csv`` - 24-patch colour chart reflectances.
* ``camera_nikon5100.csv`` - a measured consumer-camera RGB sensitivity,
  normalised to a peak of 1.
* ``reflectance_training.csv`` - assorted measured reflectances (no chart
  duplicates) used to fit the default basis.

Projector illuminants are analytic, see :func:`projector_illuminants`.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

from .spectral_model import (
    DEFAULT_ILLUMINANT_NAMES,
    BasisModel,
    IlluminationSet,
    SensitivityMatrix,
    SpectralCurve,
    WavelengthGrid,
    fit_basis,
)

# (R, G, B) on/off pattern of each uniform colour illumination
ILLUMINANT_MIX = {
    "red": (1, 0, 0),
    "green": (0, 1, 0),
    "blue": (0, 0, 1),
    "cyan": (0, 1, 1),
    "magenta": (1, 0, 1),
    "yellow": (1, 1, 0),
    "white": (1, 1, 1),
}


@lru_cache(maxsize=None)
def _table(name: str) -> tuple[tuple[str, ...], np.ndarray]:
    with resources.files("spectrascan.data").joinpath(name).open() as fh:
        header = fh.readline().strip().split(",")
        table = np.loadtxt(fh, delimiter=",", ndmin=2)
    table.setflags(write=False)
    return tuple(header), table


def _resampled(name: str, grid: WavelengthGrid) -> tuple[tuple[str, ...], np.ndarray]:
    header, table = _table(name)
    return header[1:], grid.resample(table[:, 0], table[:, 1:].T)


def load_cmfs(grid: WavelengthGrid) -> np.ndarray:
    """CIE 1931 x-bar, y-bar, z-bar as a 3 x N array."""
    return _resampled("cie1931_2deg.csv", grid)[1]


def load_colorchecker(grid: WavelengthGrid) -> dict[str, SpectralCurve]:
    """The 24 chart patches in reading order (row-major, 4 x 6)."""
    names, values = _resampled("colorchecker_babelcolor.csv", grid)
    return {n: SpectralCurve(grid, v) for n, v in zip(names, values)}


def load_camera_sensitivity(grid: WavelengthGrid) -> SensitivityMatrix:
    return SensitivityMatrix(grid, np.clip(_resampled("camera_nikon5100.csv", grid)[1], 0, None))


def load_training_reflectances(grid: WavelengthGrid) -> list[SpectralCurve]:
    _, values = _resampled("reflectance_training.csv", grid)
    return [SpectralCurve(grid, v) for v in values]


def _gauss(wl, mu, sigma):
    return np.exp(-0.5 * ((wl - mu) / sigma) ** 2)


def projector_primaries(grid: WavelengthGrid) -> np.ndarray:
    """Relative spectral power of the projector's R, G and B primaries (3 x N).

    Shaped after a lamp-based LCD projector: a narrow blue line, a broad
    green band with a yellow shoulder and a red band with some orange
    leakage. Peak power is 1.
    """
    wl = grid.wavelengths
    red = _gauss(wl, 615, 18) + 0.25 * _gauss(wl, 585, 10)
    green = _gauss(wl, 545, 20) + 0.3 * _gauss(wl, 578, 9)
    blue = _gauss(wl, 455, 13) + 0.15 * _gauss(wl, 490, 15)
    prim = np.stack([red, green, blue])
    return prim / prim.max(axis=1, keepdims=True)


def projector_illuminants(grid: WavelengthGrid, power: float = 1.0) -> IlluminationSet:
    """The seven binary RGB mixtures red..white, scaled by ``power``."""
    prim = projector_primaries(grid)
    spectra = np.stack([np.array(ILLUMINANT_MIX[n], dtype=float) @ prim for n in DEFAULT_ILLUMINANT_NAMES])
    return IlluminationSet(grid, power * spectra, DEFAULT_ILLUMINANT_NAMES)


def default_basis(grid: WavelengthGrid, n_basis: int = 8, center: bool = False) -> BasisModel:
    """PCA basis fitted on the bundled training reflectances."""
    return fit_basis(load_training_reflectances(grid), n_basis, center=center)
