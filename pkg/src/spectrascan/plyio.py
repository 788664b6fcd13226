"""Minimal PLY reader/writer for point clouds and triangle meshes.

Writes binary little-endian; reads ascii and both binary byte orders.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import TriangleMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


def write_ply(path, vertex: dict[str, np.ndarray], faces: np.ndarray | None = None, face_props: dict | None = None) -> None:
    """Write vertex properties (and optional triangles) as binary little-endian PLY.

    ``vertex`` maps property name to a 1-D array; all arrays share a length.
    """
    names = list(vertex)
    n = len(vertex[names[0]]) if names else 0
    fields = []
    for name in names:
        arr = np.asarray(vertex[name])
        if arr.shape != (n,):
            raise ValueError(f"vertex property {name} has shape {arr.shape}, expected ({n},)")
        code = arr.dtype.str[1:]
        if code not in _NP_TO_PLY:
            code = "f4" if arr.dtype.kind == "f" else "i4"
        fields.append((name, "<" + code))
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_NP_TO_PLY[f[1][1:]]} {f[0]}" for f in fields]
    face_props = face_props or {}
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
        for name, arr in face_props.items():
            header.append(f"property int {name}")
    header.append("end_header")
    rec = np.empty(n, dtype=fields)
    for name, dt in fields:
        rec[name] = np.asarray(vertex[name]).astype(dt)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
        if faces is not None:
            fdt = [("n", "u1"), ("idx", "<i4", (3,))] + [(k, "<i4") for k in face_props]
            frec = np.empty(len(faces), dtype=fdt)
            frec["n"] = 3
            frec["idx"] = faces
            for k, arr in face_props.items():
                frec[k] = arr
            fh.write(frec.tobytes())


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("unterminated PLY header")
        parts = line.decode("ascii").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1]["props"].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            return fmt, elements


def read_ply(path) -> dict[str, dict[str, np.ndarray]]:
    """Return ``{element_name: {property: array}}``. Face lists must be triangles."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        out = {}
        if fmt == "ascii":
            tokens = fh.read().split()
            pos = 0
            for el in elements:
                data = {p[0]: [] for p in el["props"]}
                for _ in range(el["count"]):
                    for p in el["props"]:
                        if p[1] == "list":
                            k = int(tokens[pos])
                            data[p[0]].append([float(t) for t in tokens[pos + 1 : pos + 1 + k]])
                            pos += 1 + k
                        else:
                            data[p[0]].append(float(tokens[pos]))
                            pos += 1
                out[el["name"]] = {k: np.asarray(v) for k, v in data.items()}
            return out
        order = "<" if fmt == "binary_little_endian" else ">"
        for el in elements:
            has_list = any(p[1] == "list" for p in el["props"])
            if not has_list:
                dt = [(p[0], order + _PLY_TYPES[p[1]]) for p in el["props"]]
                rec = np.frombuffer(fh.read(np.dtype(dt).itemsize * el["count"]), dtype=dt)
                out[el["name"]] = {p[0]: rec[p[0]].astype(np.float64) for p in el["props"]}
                continue
            # assume fixed-length triangle lists, which is all this package writes
            dt = []
            for p in el["props"]:
                if p[1] == "list":
                    dt += [(p[0] + "__n", order + _PLY_TYPES[p[2]]), (p[0], order + _PLY_TYPES[p[3]], (3,))]
                else:
                    dt.append((p[0], order + _PLY_TYPES[p[1]]))
            rec = np.frombuffer(fh.read(np.dtype(dt).itemsize * el["count"]), dtype=dt)
            list_names = [p[0] for p in el["props"] if p[1] == "list"]
            if any(np.any(rec[n + "__n"] != 3) for n in list_names):
                raise ValueError("only triangle faces are supported in binary PLY")
            out[el["name"]] = {p[0]: np.array(rec[p[0]]) for p in el["props"]}
    return out


def write_mesh(path, mesh: TriangleMesh) -> None:
    v = mesh.vertices
    props = {"material": mesh.materials} if mesh.materials is not None else None
    write_ply(path, {"x": v[:, 0], "y": v[:, 1], "z": v[:, 2]}, mesh.triangles, props)


def read_mesh(path) -> TriangleMesh:
    data = read_ply(path)
    v = data["vertex"]
    face = data.get("face", {})
    tri = face.get("vertex_indices", face.get("vertex_index"))
    tri = np.asarray([np.asarray(t, dtype=np.int64) for t in tri]) if tri is not None else np.zeros((0, 3), np.int64)
    mats = face.get("material")
    return TriangleMesh(np.column_stack([v["x"], v["y"], v["z"]]), tri.reshape(-1, 3), None if mats is None else mats.astype(np.int64))


def write_points(path, points, normals=None, extra: dict[str, np.ndarray] | None = None, colors=None) -> None:
    """Point cloud with optional normals, uchar colours and extra float columns.

    ``extra`` values may be 2-D; column ``j`` of entry ``name`` is written as
    ``name_j`` (used for per-point reflectance spectra).
    """
    points = np.asarray(points, float)
    props = {"x": points[:, 0].astype("f4"), "y": points[:, 1].astype("f4"), "z": points[:, 2].astype("f4")}
    if normals is not None:
        normals = np.asarray(normals, float)
        props.update(nx=normals[:, 0].astype("f4"), ny=normals[:, 1].astype("f4"), nz=normals[:, 2].astype("f4"))
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype("u1")
        props.update(red=c[:, 0], green=c[:, 1], blue=c[:, 2])
    for name, arr in (extra or {}).items():
        arr = np.asarray(arr)
        if arr.ndim == 1:
            props[name] = arr.astype("f4")
        else:
            for j in range(arr.shape[1]):
                props[f"{name}_{j}"] = arr[:, j].astype("f4")
    write_ply(path, props)


def read_points(path) -> dict[str, np.ndarray]:
    """Vertex properties of a point cloud, with ``points``/``normals`` assembled."""
    v = read_ply(path)["vertex"]
    out = dict(v)
    out["points"] = np.column_stack([v["x"], v["y"], v["z"]])
    if "nx" in v:
        out["normals"] = np.column_stack([v["nx"], v["ny"], v["nz"]])
    return out


def stacked(props: dict[str, np.ndarray], name: str) -> np.ndarray | None:
    """Reassemble ``name_0, name_1, ...`` columns written by :func:`write_points`."""
    cols = []
    j = 0
    while f"{name}_{j}" in props:
        cols.append(props[f"{name}_{j}"])
        j += 1
    return np.column_stack(cols) if cols else None
