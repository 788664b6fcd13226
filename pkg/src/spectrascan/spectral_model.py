"""Wavelength-sampled quantities and the linear image-formation model.

Every curve in a pipeline lives on one :class:`WavelengthGrid`. A camera
pixel observing a Lambertian point under projector illuminant ``n`` in
channel ``m`` records ``s * sum_l c_m(l) * L_n(l) * r(l)``; stacking the
channels and illuminants (illuminant-major, channel-minor) gives the
``3 * N_l`` intensity vector produced by :func:`render_intensity`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

CHANNELS = ("R", "G", "B")
DEFAULT_ILLUMINANT_NAMES = ("red", "green", "blue", "cyan", "magenta", "yellow", "white")

# linear sRGB from CIE XYZ (IEC 61966-2-1, D65)
_XYZ_TO_LINEAR_SRGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength sampling ``start_nm + i * step_nm``, ``i < count``."""

    start_nm: float = 410.0
    step_nm: float = 10.0
    count: int = 27

    def __post_init__(self):
        if not self.step_nm > 0:
            raise ConfigurationError(f"step_nm must be positive, got {self.step_nm}")
        if int(self.count) != self.count or self.count < 3:
            raise ConfigurationError(f"grid needs at least 3 samples, got {self.count}")
        object.__setattr__(self, "start_nm", float(self.start_nm))
        object.__setattr__(self, "step_nm", float(self.step_nm))
        object.__setattr__(self, "count", int(self.count))

    @classmethod
    def from_range(cls, start_nm: float, stop_nm: float, step_nm: float) -> "WavelengthGrid":
        """Grid covering ``[start_nm, stop_nm]`` inclusive."""
        count = int(round((stop_nm - start_nm) / step_nm)) + 1
        return cls(start_nm, step_nm, count)

    @property
    def wavelengths(self) -> np.ndarray:
        return self.start_nm + self.step_nm * np.arange(self.count)

    @property
    def stop_nm(self) -> float:
        return self.start_nm + self.step_nm * (self.count - 1)

    def resample(self, wavelengths, values) -> np.ndarray:
        """Linearly interpolate tabulated ``values`` onto this grid.

        ``values`` may be 1-D or have wavelength as its last axis. Samples
        outside the tabulated range take the nearest end value.
        """
        values = np.asarray(values, dtype=float)
        wavelengths = np.asarray(wavelengths, dtype=float)
        flat = values.reshape(-1, values.shape[-1])
        out = np.stack([np.interp(self.wavelengths, wavelengths, row) for row in flat])
        return out.reshape(values.shape[:-1] + (self.count,))

    def to_dict(self) -> dict:
        return {"start_nm": self.start_nm, "step_nm": self.step_nm, "count": self.count}


def _check_grid(*grids: WavelengthGrid) -> WavelengthGrid:
    first = grids[0]
    for g in grids[1:]:
        if g != first:
            raise ConfigurationError(f"wavelength grid mismatch: {first} vs {g}")
    return first


@dataclass(frozen=True, eq=False)
class SpectralCurve:
    """A reflectance, illuminant power or sensitivity sampled on ``grid``.

    Negative values are accepted because unconstrained reflectance estimates
    can dip below zero; use :meth:`is_nonnegative` where it matters.
    """

    grid: WavelengthGrid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.grid.count,):
            raise ConfigurationError(
                f"curve has {values.shape} samples, grid expects ({self.grid.count},)"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("spectral curve contains non-finite values")
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: WavelengthGrid, value: float) -> "SpectralCurve":
        return cls(grid, np.full(grid.count, float(value)))

    def is_nonnegative(self) -> bool:
        return bool(np.all(self.values >= 0))

    def clipped(self, lo: float = 0.0, hi: float | None = None) -> "SpectralCurve":
        return SpectralCurve(self.grid, np.clip(self.values, lo, hi))

    def __mul__(self, other: float) -> "SpectralCurve":
        return SpectralCurve(self.grid, self.values * float(other))

    __rmul__ = __mul__

    def __add__(self, other: "SpectralCurve") -> "SpectralCurve":
        _check_grid(self.grid, other.grid)
        return SpectralCurve(self.grid, self.values + other.values)


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    """Camera RGB spectral sensitivities, stored as the ``3 x N`` matrix ``C_rgb^T``."""

    grid: WavelengthGrid
    rows: np.ndarray

    def __post_init__(self):
        rows = _frozen(self.rows)
        if rows.shape != (3, self.grid.count):
            raise ConfigurationError(f"sensitivity must be 3 x {self.grid.count}, got {rows.shape}")
        if np.any(rows < 0):
            raise ValueError("camera sensitivities must be nonnegative")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_curves(cls, curves: Sequence[SpectralCurve]) -> "SensitivityMatrix":
        grid = _check_grid(*(c.grid for c in curves))
        return cls(grid, np.stack([c.values for c in curves]))

    def channel(self, m: int) -> SpectralCurve:
        return SpectralCurve(self.grid, self.rows[m])


@dataclass(frozen=True, eq=False)
class IlluminationSet:
    """Ordered projector illuminant spectra, one row per illuminant."""

    grid: WavelengthGrid
    spectra: np.ndarray
    names: tuple = DEFAULT_ILLUMINANT_NAMES

    def __post_init__(self):
        spectra = _frozen(self.spectra)
        if spectra.ndim != 2 or spectra.shape[1] != self.grid.count:
            raise ConfigurationError(
                f"illuminants must be N_l x {self.grid.count}, got {spectra.shape}"
            )
        if np.any(spectra < 0):
            raise ValueError("illuminant power must be nonnegative")
        names = tuple(self.names)
        if len(names) != spectra.shape[0]:
            names = tuple(f"L{i}" for i in range(spectra.shape[0]))
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_curves(cls, curves: Sequence[SpectralCurve], names=None) -> "IlluminationSet":
        grid = _check_grid(*(c.grid for c in curves))
        return cls(grid, np.stack([c.values for c in curves]), tuple(names or ()))

    def __len__(self) -> int:
        return self.spectra.shape[0]

    def illuminant(self, n: int) -> SpectralCurve:
        return SpectralCurve(self.grid, self.spectra[n])

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True, eq=False)
class BasisModel:
    """Linear reflectance model ``r = basis @ alpha + mean``."""

    grid: WavelengthGrid
    basis: np.ndarray
    mean: np.ndarray | None = None
    explained_variance: np.ndarray | None = None
    total_variance: float | None = None

    def __post_init__(self):
        basis = _frozen(self.basis)
        if basis.ndim != 2 or basis.shape[0] != self.grid.count:
            raise ConfigurationError(f"basis must be {self.grid.count} x N_b, got {basis.shape}")
        if basis.shape[1] >= self.grid.count + 1:
            raise ConfigurationError("number of basis functions exceeds the grid size")
        mean = np.zeros(self.grid.count) if self.mean is None else self.mean
        mean = _frozen(mean)
        if mean.shape != (self.grid.count,):
            raise ConfigurationError("basis mean has the wrong length")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "mean", mean)
        if self.explained_variance is not None:
            object.__setattr__(self, "explained_variance", _frozen(self.explained_variance))

    @property
    def n_basis(self) -> int:
        return self.basis.shape[1]

    @property
    def explained_variance_ratio(self) -> np.ndarray | None:
        if self.explained_variance is None or not self.total_variance:
            return None
        return self.explained_variance / self.total_variance

    def reconstruct(self, alpha) -> SpectralCurve:
        return SpectralCurve(self.grid, self.basis @ np.asarray(alpha, dtype=float) + self.mean)

    def project(self, curve: SpectralCurve) -> np.ndarray:
        """Least-squares coefficients of ``curve`` (exact for orthonormal columns)."""
        _check_grid(self.grid, curve.grid)
        coef, *_ = np.linalg.lstsq(self.basis, curve.values - self.mean, rcond=None)
        return coef


def forward_matrix(illum: IlluminationSet, sens: SensitivityMatrix) -> np.ndarray:
    """``C^T L`` as a dense ``(3 N_l) x N`` matrix, illuminant-major rows."""
    _check_grid(illum.grid, sens.grid)
    # row (n, m) = c_m * l_n
    return (illum.spectra[:, None, :] * sens.rows[None, :, :]).reshape(-1, illum.grid.count)


def render_intensity(
    reflectance: SpectralCurve,
    illum: IlluminationSet,
    sens: SensitivityMatrix,
    shading: float = 1.0,
) -> np.ndarray:
    """Multispectral intensity vector of one point for one projector-camera pair."""
    _check_grid(reflectance.grid, illum.grid, sens.grid)
    if shading < 0:
        raise ValueError(f"shading must be nonnegative, got {shading}")
    return shading * (forward_matrix(illum, sens) @ reflectance.values)


def render_from_coefficients(
    alpha,
    basis: BasisModel,
    illum: IlluminationSet,
    sens: SensitivityMatrix,
    shading: float = 1.0,
) -> np.ndarray:
    """:func:`render_intensity` of the basis reconstruction ``B alpha + mean``."""
    return render_intensity(basis.reconstruct(alpha), illum, sens, shading)


def fit_basis(samples: Sequence[SpectralCurve], n_basis: int, center: bool = False) -> BasisModel:
    """Principal directions of a set of reflectance curves.

    With ``center=False`` (the default) the decomposition is taken on the raw
    curves, i.e. of the second-moment matrix, so a curve is modelled as
    ``B alpha`` with no offset. ``center=True`` subtracts the sample mean
    first and stores it in :attr:`BasisModel.mean`.

    Columns are sorted by decreasing explained variance and each is signed so
    its largest-magnitude entry is positive.
    """
    if len(samples) == 0:
        raise ValueError("fit_basis needs at least one sample")
    grid = _check_grid(*(s.grid for s in samples))
    X = np.stack([s.values for s in samples])
    if not 1 <= n_basis <= min(grid.count, X.shape[0]):
        raise ValueError(
            f"n_basis must be in [1, {min(grid.count, X.shape[0])}], got {n_basis}"
        )
    mean = X.mean(axis=0) if center else np.zeros(grid.count)
    Xc = X - mean
    _, sv, vt = np.linalg.svd(Xc, full_matrices=False)
    variance = sv**2 / X.shape[0]
    basis = vt[:n_basis].T.copy()
    for j in range(n_basis):
        col = basis[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, j] = -col
    return BasisModel(grid, basis, mean, variance[:n_basis], float(variance.sum()))


def second_derivative_matrix(grid: WavelengthGrid) -> np.ndarray:
    """Second-difference operator with zero boundary rows."""
    n = grid.count
    D = np.zeros((n, n))
    i = np.arange(1, n - 1)
    D[i, i - 1] = 1.0
    D[i, i] = -2.0
    D[i, i + 1] = 1.0
    return D


def _srgb_encode(linear: np.ndarray) -> np.ndarray:
    linear = np.clip(linear, 0.0, None)
    return np.where(
        linear <= 0.0031308, 12.92 * linear, 1.055 * np.power(linear, 1 / 2.4) - 0.055
    )


def reflectance_to_srgb(
    reflectance: SpectralCurve,
    illuminant: SpectralCurve,
    cmfs: np.ndarray | None = None,
) -> tuple[float, float, float]:
    """Display colour of a reflectance viewed under ``illuminant``.

    XYZ is integrated on the curve's grid, converted to linear sRGB and
    white balanced per channel so the perfect reflector lands on (1, 1, 1);
    the result is gamma encoded and clipped to [0, 1]. ``cmfs`` (3 x N) defaults
    to the bundled CIE 1931 2-degree observer resampled to the grid.
    """
    _check_grid(reflectance.grid, illuminant.grid)
    if cmfs is None:
        from .datasets import load_cmfs

        cmfs = load_cmfs(reflectance.grid)
    weights = np.asarray(cmfs) * illuminant.values
    xyz = weights @ reflectance.values
    xyz_white = weights.sum(axis=1)
    rgb = _XYZ_TO_LINEAR_SRGB @ xyz
    rgb_white = _XYZ_TO_LINEAR_SRGB @ xyz_white
    rgb = np.where(rgb_white > 0, rgb / np.where(rgb_white > 0, rgb_white, 1.0), 0.0)
    out = np.clip(_srgb_encode(rgb), 0.0, 1.0)
    return float(out[0]), float(out[1]), float(out[2])


# --- CSV I/O -----------------------------------------------------------------


def write_curve_csv(path, curve: SpectralCurve) -> None:
    table = np.column_stack([curve.grid.wavelengths, curve.values])
    np.savetxt(path, table, delimiter=",", header="wavelength_nm,value", comments="", fmt="%.17g")


def read_curve_csv(path, grid: WavelengthGrid | None = None) -> SpectralCurve:
    """Read a two-column curve; resample onto ``grid`` when given."""
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    wl, values = table[:, 0], table[:, 1]
    if grid is None:
        steps = np.diff(wl)
        if len(wl) < 3 or not np.allclose(steps, steps[0]):
            raise ConfigurationError(f"{path}: wavelengths are not uniformly spaced")
        grid = WavelengthGrid(wl[0], steps[0], len(wl))
        return SpectralCurve(grid, values)
    return SpectralCurve(grid, grid.resample(wl, values))


def write_basis_csv(path, model: BasisModel) -> None:
    meta = {"grid": model.grid.to_dict(), "n_basis": model.n_basis, "has_mean": bool(np.any(model.mean))}
    cols = [model.grid.wavelengths, *model.basis.T, model.mean]
    header = "wavelength_nm," + ",".join(f"b{j}" for j in range(model.n_basis)) + ",mean"
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        fh.write(header + "\n")
        np.savetxt(fh, np.column_stack(cols), delimiter=",", fmt="%.17g")


def read_basis_csv(path) -> BasisModel:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise ConfigurationError(f"{path}: missing JSON header line")
    meta = json.loads(first[1:])
    grid = WavelengthGrid(**meta["grid"])
    table = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    nb = meta["n_basis"]
    return BasisModel(grid, table[:, 1 : 1 + nb], table[:, 1 + nb])
