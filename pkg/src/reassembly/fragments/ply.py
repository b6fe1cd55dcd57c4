"""PLY point-cloud ingestion and export (ASCII and binary little-endian).

Only the vertex element is read and it must come first; trailing
elements (faces etc.) are ignored. Supported vertex properties are
x,y,z (float or double), optional nx,ny,nz, and optional red,green,blue
as uchar (scaled by 1/255) or float (taken as already in [0,1]).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DataError
from .core import Fragment

_PLY_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "int8": "i1",
    "short": "<i2",
    "ushort": "<u2",
    "int": "<i4",
    "uint": "<u4",
    "int32": "<i4",
    "uint32": "<u4",
}


def _parse_header(raw: bytes, path) -> tuple[str, int, list[tuple[str, str]], int]:
    """Returns (format, vertex count, [(dtype, name)...], header byte length)."""
    first, _, _ = raw.partition(b"\n")
    if first.strip() != b"ply":
        raise DataError(f"{path}: line 1: not a PLY file (missing 'ply')")
    end = raw.find(b"end_header")
    if end < 0:
        raise DataError(f"{path}: no end_header in PLY file")
    nl = raw.find(b"\n", end)
    header_len = nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    vertex_count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    seen_element = False
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] == "comment" or tokens[0] == "obj_info":
            continue
        if tokens[0] == "format":
            if len(tokens) < 3 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise DataError(f"{path}: line {lineno}: unsupported format {line!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] == "vertex":
                if seen_element:
                    raise DataError(f"{path}: line {lineno}: vertex element must come first")
                try:
                    vertex_count = int(tokens[2])
                except (IndexError, ValueError):
                    raise DataError(f"{path}: line {lineno}: bad element line {line!r}")
                in_vertex = True
            else:
                in_vertex = False
            seen_element = True
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise DataError(f"{path}: line {lineno}: list property on vertex unsupported")
            if tokens[1] not in _PLY_DTYPES:
                raise DataError(f"{path}: line {lineno}: unknown property type {tokens[1]!r}")
            props.append((tokens[1], tokens[2]))
    if fmt is None:
        raise DataError(f"{path}: missing format line")
    if vertex_count is None:
        raise DataError(f"{path}: missing vertex element")
    names = [name for _, name in props]
    for coord in ("x", "y", "z"):
        if coord not in names:
            raise DataError(f"{path}: vertex element lacks property {coord!r}")
    return fmt, vertex_count, props, header_len


def _read_vertex_table(raw: bytes, path, fmt: str, count: int, props, header_len: int) -> dict[str, np.ndarray]:
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, _PLY_DTYPES[t]) for t, name in props])
        need = header_len + count * dtype.itemsize
        if len(raw) < need:
            raise DataError(f"{path}: truncated binary payload ({len(raw)} < {need} bytes)")
        table = np.frombuffer(raw, dtype=dtype, count=count, offset=header_len)
        return {name: np.asarray(table[name]) for _, name in props}
    # ASCII: one vertex per non-empty line after the header.
    text = raw[header_len:].decode("ascii", errors="replace")
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if len(rows) < count:
        raise DataError(f"{path}: expected {count} vertex lines, found {len(rows)}")
    out: dict[str, list[float]] = {name: [] for _, name in props}
    for i in range(count):
        row = rows[i]
        if len(row) != len(props):
            raise DataError(
                f"{path}: vertex line {i + 1}: expected {len(props)} values, got {len(row)}"
            )
        for (_, name), tok in zip(props, row):
            try:
                out[name].append(float(tok))
            except ValueError:
                raise DataError(f"{path}: vertex line {i + 1}: bad number {tok!r}")
    return {name: np.asarray(vals) for name, vals in out.items()}


def estimate_normals(positions: np.ndarray, k: int = 16) -> np.ndarray:
    """Per-point normals from k-NN PCA plane fits.

    Orientation is viewpoint-free: normals point away from the cloud
    centroid, falling back to a fixed sign rule when a point sits on the
    centroid's tangent plane.
    """
    n = len(positions)
    k = min(k, n)
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k)
    if k == 1:
        idx = idx[:, None]
    neigh = positions[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]  # smallest-eigenvalue direction
    outward = positions - positions.mean(axis=0)
    flip = np.einsum("ni,ni->n", normals, outward) < 0.0
    normals[flip] = -normals[flip]
    ambiguous = np.abs(np.einsum("ni,ni->n", normals, outward)) < 1e-12
    if np.any(ambiguous):
        lead = np.argmax(np.abs(normals[ambiguous]), axis=1)
        sign = np.sign(normals[ambiguous, lead])
        sign[sign == 0] = 1.0
        normals[ambiguous] *= sign[:, None]
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    lengths[lengths == 0.0] = 1.0
    return normals / lengths


def load_ply(path) -> Fragment:
    """Read a PLY point cloud into an (uncentered) Fragment.

    Missing normals are estimated (16-NN PCA); missing colors become
    0.5 gray with ``colors_defaulted`` set.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    fmt, count, props, header_len = _parse_header(raw, path)
    cols = _read_vertex_table(raw, path, fmt, count, props, header_len)

    positions = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    if not np.all(np.isfinite(positions)):
        bad = int(np.argwhere(~np.isfinite(positions))[0][0])
        raise DataError(f"{path}: non-finite coordinates at vertex {bad}")

    names = {name for _, name in props}
    if {"nx", "ny", "nz"} <= names:
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1).astype(np.float64)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        lengths[lengths == 0.0] = 1.0
        normals = normals / lengths
    else:
        normals = estimate_normals(positions)

    colors_defaulted = False
    if {"red", "green", "blue"} <= names:
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.float64)
        types = {name: t for t, name in props}
        if types["red"] in ("uchar", "uint8"):
            rgb = rgb / 255.0
        colors = np.clip(rgb, 0.0, 1.0)
    else:
        colors = np.full((count, 3), 0.5)
        colors_defaulted = True

    return Fragment(positions, normals, colors, colors_defaulted=colors_defaulted)


def save_ply(path, f: Fragment, binary: bool = True) -> None:
    """Write positions (double), normals (float), colors (float).

    Binary little-endian roundtrips coordinates bit-exactly through
    load_ply; ASCII uses repr-precision decimal.
    """
    path = Path(path)
    n = len(f)
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property float nx",
        "property float ny",
        "property float nz",
        "property float red",
        "property float green",
        "property float blue",
        "end_header",
    ]
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        dtype = np.dtype(
            [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
             ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
             ("red", "<f4"), ("green", "<f4"), ("blue", "<f4")]
        )
        table = np.empty(n, dtype=dtype)
        for i, name in enumerate(("x", "y", "z")):
            table[name] = f.positions[:, i]
        for i, name in enumerate(("nx", "ny", "nz")):
            table[name] = f.normals[:, i].astype(np.float32)
        for i, name in enumerate(("red", "green", "blue")):
            table[name] = f.colors[:, i].astype(np.float32)
        path.write_bytes(head + table.tobytes())
        return
    lines = []
    for i in range(n):
        vals = [repr(float(v)) for v in f.positions[i]]
        vals += [f"{float(v):.8g}" for v in f.normals[i]]
        vals += [f"{float(v):.8g}" for v in f.colors[i]]
        lines.append(" ".join(vals))
    path.write_bytes(head + ("\n".join(lines) + "\n").encode("ascii"))
