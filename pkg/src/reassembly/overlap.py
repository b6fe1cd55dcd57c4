"""Soft voxel occupancy and the differentiable no-overlap penalty.

Occupancy is a probabilistic union of Gaussian point kernels, so values
stay in [0,1] by construction and gradients flow to point coordinates.
Pairwise soft IoU over a shared grid gives the collision loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

DEFAULT_RESOLUTION = 32
DEFAULT_MARGIN = 0.10
DEFAULT_SIGMA_CELLS = 1.5
DEFAULT_EPS = 1e-6
TRUNCATION_SIGMAS = 3.0


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned cubic-cell lattice: origin corner, cell size, counts."""

    origin: tuple[float, float, float]
    cell_size: float
    extents: tuple[int, int, int]

    def __post_init__(self):
        if self.cell_size <= 0.0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if any(e < 1 for e in self.extents):
            raise ValueError(f"extents must be >= 1, got {self.extents}")

    @property
    def n_cells(self) -> int:
        return self.extents[0] * self.extents[1] * self.extents[2]

    def centers(self) -> np.ndarray:
        """Cell-center coordinates, flat (n_cells, 3), x fastest-varying last."""
        axes = [np.arange(e) * self.cell_size + o + 0.5 * self.cell_size
                for e, o in zip(self.extents, self.origin)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.extents) * self.cell_size

    def covers(self, points: np.ndarray) -> bool:
        lo = np.asarray(self.origin)
        return bool(np.all(points >= lo) and np.all(points <= self.upper()))


@dataclass
class OccupancyGrid:
    spec: GridSpec
    values: T.Array  # flat (n_cells,), each in [0, 1]


def fit_grid(point_sets, resolution: int = DEFAULT_RESOLUTION,
             margin: float = DEFAULT_MARGIN) -> GridSpec:
    """Cubic-cell grid of resolution^3 covering the union bounding box.

    Sized from the union's bounding sphere about its centroid, so cell
    size (and with it the smoothing radius) is unchanged when all
    fragments move rigidly together; the padded sphere's diameter always
    covers the axis-aligned box.
    """
    pts = np.concatenate([np.asarray(p.data if isinstance(p, T.Array) else p)
                          for p in point_sets])
    if len(pts) == 0:
        raise ValueError("fit_grid needs at least one point")
    center = pts.mean(axis=0)
    radius = float(np.linalg.norm(pts - center, axis=1).max())
    span = 2.0 * radius * (1.0 + margin)
    span = max(span, 1e-3)  # degenerate clouds (single point) get a floor
    cell = span / resolution
    origin = center - 0.5 * span
    return GridSpec(tuple(float(v) for v in origin), cell,
                    (resolution, resolution, resolution))


def _expand_to_cover(spec: GridSpec, points: np.ndarray) -> GridSpec:
    """Grow extents by whole cells (lattice-aligned) until points fit."""
    lo = np.asarray(spec.origin)
    cell = spec.cell_size
    below = np.maximum(0, np.ceil((lo - points.min(axis=0)) / cell + 1e-9)).astype(int)
    above = np.maximum(0, np.ceil((points.max(axis=0) - spec.upper()) / cell + 1e-9)).astype(int)
    extents = tuple(int(e + b + a) for e, b, a in zip(spec.extents, below, above))
    origin = tuple(float(o - b * cell) for o, b in zip(spec.origin, below))
    out = GridSpec(origin, cell, extents)
    if out.n_cells > 2**24:
        raise ValueError(
            f"expanding grid to cover points needs {out.extents} cells of size "
            f"{cell:g}; refit the grid to the data instead")
    return out


def voxelize(points, spec: GridSpec,
             sigma_cells: float = DEFAULT_SIGMA_CELLS) -> OccupancyGrid:
    """Soft occupancy M(x) = 1 - prod_p (1 - exp(-|x - p|^2 / 2 sigma^2)).

    Kernels are truncated beyond 3 sigma (hard zero, no gradient there).
    Points outside the grid trigger automatic expansion by whole cells;
    they are never clipped. Differentiable w.r.t. point coordinates when
    given an engine array.
    """
    if sigma_cells <= 0.0:
        raise ValueError(f"sigma_cells must be positive, got {sigma_cells}")
    is_graph = isinstance(points, T.Array)
    raw = points.data if is_graph else np.asarray(points)
    if raw.ndim != 2 or (len(raw) and raw.shape[1] != 3):
        raise ValueError(f"points must be (N, 3), got {raw.shape}")
    if len(raw) and not spec.covers(raw):
        spec = _expand_to_cover(spec, raw)
    dtype = points.dtype if is_graph else np.float64
    if len(raw) == 0:
        return OccupancyGrid(spec, T.constant(np.zeros(spec.n_cells, dtype=dtype)))

    sigma = sigma_cells * spec.cell_size
    centers = spec.centers().astype(dtype)
    p = points if is_graph else T.constant(raw.astype(dtype))
    c2 = T.constant((centers * centers).sum(axis=1, keepdims=True).astype(dtype))
    p2 = T.reshape(T.sum_(T.square(p), axis=1), (1, len(raw)))
    cross = T.matmul(T.constant(centers), T.transpose(p, (1, 0)))
    d2 = T.add(T.sub(c2, T.mul(cross, 2.0)), p2)  # (cells, N)
    keep = (d2.data <= (TRUNCATION_SIGMAS * sigma) ** 2).astype(dtype)
    k = T.mul(T.exp(T.mul(d2, -1.0 / (2.0 * sigma * sigma))), T.constant(keep))
    log_miss = T.log(T.clamp(T.sub(1.0, k), 1e-12, 1.0))
    values = T.sub(1.0, T.exp(T.sum_(log_miss, axis=1)))
    return OccupancyGrid(spec, values)


def soft_iou(mi: OccupancyGrid, mj: OccupancyGrid,
             eps: float = DEFAULT_EPS) -> T.Array:
    """Sum of cellwise minima over sum of cellwise maxima (plus eps).

    Ties between the two masks split their subgradient evenly.
    """
    if mi.spec != mj.spec:
        raise ValueError(f"grid frames differ: {mi.spec} vs {mj.spec}")
    num = T.sum_(T.minimum(mi.values, mj.values))
    den = T.add(T.sum_(T.maximum(mi.values, mj.values)), eps)
    return T.div(num, den)


def no_overlap_loss(point_sets, spec: GridSpec | None = None,
                    resolution: int = DEFAULT_RESOLUTION,
                    margin: float = DEFAULT_MARGIN,
                    sigma_cells: float = DEFAULT_SIGMA_CELLS,
                    eps: float = DEFAULT_EPS) -> T.Array:
    """Mean pairwise soft IoU of the fragments' occupancies.

    All fragments share one grid fitted to their union (unless a spec is
    given). A single fragment has no pairs and scores exactly zero.
    """
    point_sets = list(point_sets)
    if len(point_sets) == 0:
        raise ValueError("no_overlap_loss needs at least one fragment")
    first = point_sets[0]
    dtype = first.dtype if isinstance(first, T.Array) else np.float64
    if len(point_sets) == 1:
        return T.constant(np.zeros((), dtype=dtype))
    if spec is None:
        spec = fit_grid(point_sets, resolution=resolution, margin=margin)
    else:
        # expand once over the union so every fragment shares one frame
        raw = np.concatenate([np.asarray(p.data if isinstance(p, T.Array) else p)
                              for p in point_sets])
        if not spec.covers(raw):
            spec = _expand_to_cover(spec, raw)
    grids = [voxelize(p, spec, sigma_cells=sigma_cells) for p in point_sets]
    m = len(grids)
    pair_sum = None
    for i in range(m):
        for j in range(i + 1, m):
            iou = soft_iou(grids[i], grids[j], eps=eps)
            pair_sum = iou if pair_sum is None else T.add(pair_sum, iou)
    return T.mul(pair_sum, 2.0 / (m * (m - 1)))


def dump_grid(grid: OccupancyGrid, path) -> None:
    """Debug export: flat float32 occupancy plus a JSON frame sidecar."""
    import json
    from pathlib import Path

    path = Path(path)
    values = np.asarray(grid.values.data, dtype=np.float32)
    path.write_bytes(values.tobytes())
    sidecar = {
        "origin": list(grid.spec.origin),
        "cell_size": grid.spec.cell_size,
        "extents": list(grid.spec.extents),
        "dtype": "float32",
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2) + "\n")


def load_grid(path) -> OccupancyGrid:
    """Read back a dump_grid export."""
    import json
    from pathlib import Path

    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = np.frombuffer(path.read_bytes(), dtype=np.float32)
    spec = GridSpec(tuple(sidecar["origin"]), sidecar["cell_size"],
                    tuple(sidecar["extents"]))
    if values.size != spec.n_cells:
        raise ValueError(
            f"grid dump holds {values.size} cells, sidecar says {spec.n_cells}")
    return OccupancyGrid(spec, T.constant(values.astype(np.float64)))
