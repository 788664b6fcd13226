"""Binary-reflected Gray-code patterns: generation, decoding, sub-pixel features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import read_json, read_pgm, write_json, write_pgm


@dataclass(frozen=True)
class GrayCodeSpec:
    proj_width: int
    proj_height: int
    use_inverse_patterns: bool = True

    def __post_init__(self):
        if self.proj_width <= 0 or self.proj_height <= 0:
            raise ValueError("projector dimensions must be positive")

    @property
    def bits_x(self) -> int:
        return max(1, math.ceil(math.log2(self.proj_width)))

    @property
    def bits_y(self) -> int:
        return max(1, math.ceil(math.log2(self.proj_height)))

    @property
    def n_patterns(self) -> int:
        per_bit = 2 if self.use_inverse_patterns else 1
        return 2 + per_bit * (self.bits_x + self.bits_y)

    def labels(self) -> list[dict]:
        """Frame order: white, black, then per axis each bit MSB first (pattern, inverse)."""
        out = [{"kind": "white"}, {"kind": "black"}]
        for axis, bits in (("x", self.bits_x), ("y", self.bits_y)):
            for bit in reversed(range(bits)):
                out.append({"kind": "bit", "axis": axis, "bit": bit, "inverse": False})
                if self.use_inverse_patterns:
                    out.append({"kind": "bit", "axis": axis, "bit": bit, "inverse": True})
        return out

    def to_dict(self) -> dict:
        return {
            "proj_width": self.proj_width,
            "proj_height": self.proj_height,
            "use_inverse_patterns": self.use_inverse_patterns,
        }


def gray_encode(n):
    n = np.asarray(n, dtype=np.int64)
    return n ^ (n >> 1)


def gray_decode(g):
    b = np.array(g, dtype=np.int64, copy=True)
    shift = 1
    while shift < 63:
        b ^= b >> shift
        shift <<= 1
    return b


def generate_patterns(spec: GrayCodeSpec) -> list[np.ndarray]:
    """All frames as boolean ``(proj_height, proj_width)`` images."""
    gx = gray_encode(np.arange(spec.proj_width))
    gy = gray_encode(np.arange(spec.proj_height))
    shape = (spec.proj_height, spec.proj_width)
    frames = []
    for label in spec.labels():
        if label["kind"] == "white":
            frames.append(np.ones(shape, dtype=bool))
        elif label["kind"] == "black":
            frames.append(np.zeros(shape, dtype=bool))
        else:
            if label["axis"] == "x":
                on = ((gx >> label["bit"]) & 1).astype(bool)[None, :]
            else:
                on = ((gy >> label["bit"]) & 1).astype(bool)[:, None]
            on = np.broadcast_to(on, shape)
            frames.append(~on if label["inverse"] else on.copy())
    return frames


@dataclass(frozen=True, eq=False)
class CodeMap:
    """Per-pixel decoded projector pixel. ``column``/``row`` are -1 where ``valid`` is False."""

    column: np.ndarray
    row: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray
    proj_width: int
    proj_height: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def decode(
    stack,
    spec: GrayCodeSpec,
    threshold_mode: str = "inverse",
    contrast_floor: float = 0.05,
) -> CodeMap:
    """Decode a captured pattern stack into projector coordinates.

    Args:
        stack: Grayscale images in :meth:`GrayCodeSpec.labels` order.
        spec: Pattern layout that produced the stack.
        threshold_mode: ``"inverse"`` compares each pattern with its
            complement; ``"mean"`` compares with the white/black midpoint.
        contrast_floor: Minimum white-minus-black difference (in image
            units, full scale 1) for a pixel to be decodable.
    """
    labels = spec.labels()
    if len(stack) != len(labels):
        raise ValueError(f"stack has {len(stack)} frames, spec expects {len(labels)}")
    if threshold_mode not in ("inverse", "mean"):
        raise ValueError(f"unknown threshold_mode {threshold_mode!r}")
    if threshold_mode == "inverse" and not spec.use_inverse_patterns:
        raise ValueError("inverse thresholding needs inverse patterns in the stack")
    frames = [np.asarray(f, dtype=float) for f in stack]
    white, black = frames[0], frames[1]
    contrast = white - black
    valid = contrast >= contrast_floor
    mid = 0.5 * (white + black)
    codes = {"x": np.zeros(white.shape, np.int64), "y": np.zeros(white.shape, np.int64)}
    margin = np.full(white.shape, np.inf)
    i = 2
    while i < len(labels):
        lab = labels[i]
        img = frames[i]
        if threshold_mode == "inverse":
            ref = frames[i + 1]
        else:
            ref = mid
        diff = img - ref
        codes[lab["axis"]] |= (diff > 0).astype(np.int64) << lab["bit"]
        margin = np.minimum(margin, np.abs(diff))
        i += 2 if spec.use_inverse_patterns else 1
    col = gray_decode(codes["x"])
    row = gray_decode(codes["y"])
    valid &= (col < spec.proj_width) & (row < spec.proj_height)
    with np.errstate(divide="ignore", invalid="ignore"):
        confidence = np.where(valid, margin / np.where(contrast > 0, contrast, 1.0), 0.0)
    col = np.where(valid, col, -1)
    row = np.where(valid, row, -1)
    return CodeMap(col, row, valid, confidence, spec.proj_width, spec.proj_height)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Sub-pixel image position of every projector code seen in one image.

    ``codes[i] = (column, row)`` of the projector pixel, ``positions[i] = (u, v)``
    in image pixels (pixel ``(x, y)`` spans ``[x, x+1) x [y, y+1)``).
    """

    codes: np.ndarray
    positions: np.ndarray
    support: np.ndarray

    def __len__(self) -> int:
        return len(self.support)

    def as_dict(self) -> dict[tuple[int, int], tuple[float, float]]:
        return {(int(c), int(r)): (float(u), float(v)) for (c, r), (u, v) in zip(self.codes, self.positions)}

    def lookup(self, column: int, row: int):
        hit = np.flatnonzero((self.codes[:, 0] == column) & (self.codes[:, 1] == row))
        return None if hit.size == 0 else self.positions[hit[0]]


def boundary_pixels(codes: CodeMap) -> np.ndarray:
    """Valid pixels whose 4-neighbourhood leaves the decoded surface.

    A neighbour that is invalid, outside the image, or whose code jumps by
    more than one projector pixel marks a shadow, silhouette or depth edge.
    """
    valid = codes.valid
    col, row = codes.column, codes.row
    edge = np.zeros(valid.shape, bool)
    edge[0, :] = edge[-1, :] = True
    edge[:, 0] = edge[:, -1] = True
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        jump = (
            ~valid[a]
            | ~valid[b]
            | (np.abs(col[a] - col[b]) > 1)
            | (np.abs(row[a] - row[b]) > 1)
        )
        edge[a] |= jump
        edge[b] |= jump
    return edge & valid


def extract_features(codes: CodeMap, max_support: int = 64, reject_edges: bool = True) -> FeatureSet:
    """Centroid of the pixel centres sharing each decoded code.

    Codes seen by more than ``max_support`` pixels are dropped. With
    ``reject_edges`` a code is also dropped when any of its pixels lies on a
    shadow/silhouette/depth edge (see :func:`boundary_pixels`) or when its
    pixels are not 4-connected: such footprints are truncated or split
    between surfaces and their centroid is biased.
    """
    ys, xs = np.nonzero(codes.valid)
    key = codes.column[ys, xs] * codes.proj_height + codes.row[ys, xs]
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    su = np.bincount(inverse, weights=xs + 0.5, minlength=uniq.size)
    sv = np.bincount(inverse, weights=ys + 0.5, minlength=uniq.size)
    keep = counts <= max_support
    if reject_edges and ys.size:
        edge = boundary_pixels(codes)[ys, xs]
        keep &= np.bincount(inverse, weights=edge, minlength=uniq.size) == 0
        keep &= _components_per_code(codes, ys, xs, inverse, uniq.size) == 1
    uniq, counts = uniq[keep], counts[keep]
    pos = np.column_stack([su[keep] / counts, sv[keep] / counts])
    code_xy = np.column_stack([uniq // codes.proj_height, uniq % codes.proj_height])
    return FeatureSet(code_xy.astype(np.int64), pos, counts.astype(np.int64))


def _components_per_code(codes, ys, xs, inverse, n_codes):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    h, w = codes.valid.shape
    pix = np.full((h, w), -1, np.int64)
    pix[ys, xs] = np.arange(ys.size)
    label = np.full((h, w), -1, np.int64)
    label[ys, xs] = inverse
    rows, cols = [], []
    for a, b in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))), ((slice(None, -1), slice(None)), (slice(1, None), slice(None)))):
        same = (label[a] >= 0) & (label[a] == label[b])
        rows.append(pix[a][same])
        cols.append(pix[b][same])
    r, c = np.concatenate(rows), np.concatenate(cols)
    g = coo_matrix((np.ones(r.size), (r, c)), shape=(ys.size, ys.size))
    _, comp = connected_components(g, directed=False)
    # components per code = distinct component labels among its pixels
    pairs = np.unique(inverse * (comp.max() + 1) + comp)
    return np.bincount(pairs // (comp.max() + 1), minlength=n_codes)


# --- pattern stack files -------------------------------------------------------


def write_stack(directory, images, spec: GrayCodeSpec, prefix: str = "pat", extra: dict | None = None) -> Path:
    """Write ``<prefix>_000.pgm ...`` (16-bit) plus ``<prefix>_manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for k, img in enumerate(images):
        name = f"{prefix}_{k:03d}.pgm"
        write_pgm(directory / name, np.asarray(img, dtype=float))
        names.append(name)
    manifest = {"spec": spec.to_dict(), "frames": names, "labels": spec.labels(), **(extra or {})}
    path = directory / f"{prefix}_manifest.json"
    write_json(path, manifest)
    return path


def read_stack(manifest_path) -> tuple[list[np.ndarray], GrayCodeSpec]:
    manifest_path = Path(manifest_path)
    manifest = read_json(manifest_path)
    spec = GrayCodeSpec(**manifest["spec"])
    frames = [read_pgm(manifest_path.parent / name) for name in manifest["frames"]]
    return frames, spec
