"""Assembly evaluation: pose errors, part accuracy, Chamfer distance.

All pose metrics gauge both prediction and ground truth to the anchor
fragment's frame before comparing, so a global rigid motion of either
set leaves every number unchanged. The anchor itself is pinned by that
gauge rather than predicted, so it is excluded from the pose-error and
part-accuracy aggregates (its row still appears in ``per_fragment``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .fragments import UnassembledObject, anchor_index
from .liegroup import RigidTransform, apply_transform, so3_log

_BRUTE_LIMIT = 10**6


@dataclass
class AssemblyReport:
    """Per-object evaluation summary.

    ``rmse_trans`` is in normalized scene units; ``rmse_trans_mm``
    rescales each fragment's error by its stored ``scale`` before
    aggregating. ``per_fragment`` holds one ``(rot_err_deg, trans_err,
    cd)`` triple per fragment, anchor included.
    """

    rmse_rot_deg: float
    rmse_trans: float
    part_accuracy_pct: float
    chamfer: float
    per_fragment: list[tuple[float, float, float]]
    rmse_trans_mm: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.part_accuracy_pct <= 100.0):
            raise ValueError("part_accuracy_pct outside [0, 100]")
        for name in ("rmse_rot_deg", "rmse_trans", "chamfer"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


def rotation_error_deg(pred: np.ndarray, gt: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    return float(np.linalg.norm(so3_log(gt.T @ pred)) * 180.0 / np.pi)


def rmse_rotation(preds, gts) -> float:
    """Root-mean-square geodesic rotation error over paired lists."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} vs {len(gts)}")
    if not preds:
        raise ValueError("empty prediction list")
    errs = [rotation_error_deg(p, g) for p, g in zip(preds, gts)]
    return float(np.sqrt(np.mean(np.square(errs))))


def rmse_translation(preds, gts) -> float:
    """Root-mean-square Euclidean error between paired translations."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} vs {len(gts)}")
    if not preds:
        raise ValueError("empty prediction list")
    errs = [np.linalg.norm(np.asarray(p) - np.asarray(g)) for p, g in zip(preds, gts)]
    return float(np.sqrt(np.mean(np.square(errs))))


def _nn_sq_brute(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared nearest-neighbor distance from each row of a into b."""
    out = np.empty(len(a))
    # block over queries so the distance matrix stays small
    step = max(_BRUTE_LIMIT // max(len(b), 1), 1)
    for s in range(0, len(a), step):
        blk = a[s : s + step]
        d2 = np.square(blk[:, None, :] - b[None, :, :]).sum(axis=2)
        out[s : s + step] = d2.min(axis=1)
    return out


class _PointGrid:
    """Uniform hash grid over a cloud for exact nearest-neighbor queries."""

    def __init__(self, points: np.ndarray):
        self.points = points
        lo = points.min(axis=0)
        span = float(np.max(points.max(axis=0) - lo))
        # cubic cells, ~2 points per occupied cell on average
        self.h = max(span / max(round(len(points) ** (1.0 / 3.0)), 1), 1e-12)
        self.lo = lo
        cells = np.floor((points - lo) / self.h).astype(np.int64)
        self.kmax = cells.max(axis=0)
        self.table: dict[tuple, np.ndarray] = {}
        order = np.lexsort(cells.T)
        sorted_cells = cells[order]
        splits = np.nonzero(np.any(np.diff(sorted_cells, axis=0), axis=1))[0] + 1
        for group in np.split(order, splits):
            self.table[tuple(cells[group[0]])] = group

    def _ring(self, c, r):
        """Occupied-cell indices on the Chebyshev-radius-r shell around c.

        Enumerates only the shell's intersection with the occupied
        bounding box, so shells around far-away queries stay cheap.
        """
        found = []
        lo = [max(c[i] - r, 0) for i in range(3)]
        hi = [min(c[i] + r, int(self.kmax[i])) for i in range(3)]
        for x in range(lo[0], hi[0] + 1):
            for y in range(lo[1], hi[1] + 1):
                for z in range(lo[2], hi[2] + 1):
                    if max(abs(x - c[0]), abs(y - c[1]), abs(z - c[2])) != r:
                        continue
                    hit = self.table.get((x, y, z))
                    if hit is not None:
                        found.append(hit)
        return found

    def query_sq(self, q: np.ndarray) -> float:
        c = tuple(int(v) for v in np.floor((q - self.lo) / self.h))
        # shells strictly closer than the box are empty; shells past its
        # far corner cannot add cells, so the search is always finite
        r_start = max(max(-c[i], c[i] - int(self.kmax[i]), 0) for i in range(3))
        r_cover = max(max(abs(c[i]), abs(c[i] - int(self.kmax[i]))) for i in range(3))
        best = np.inf
        for r in range(r_start, r_cover + 1):
            for idx in self._ring(c, r):
                d2 = np.square(self.points[idx] - q).sum(axis=1).min()
                best = min(best, float(d2))
            # all unsearched cells now lie beyond shell r: at least r*h away
            if best <= (r * self.h) ** 2:
                break
        return best


def chamfer_distance(a: np.ndarray, b: np.ndarray, squared: bool = True) -> float:
    """Symmetric Chamfer distance between two clouds.

    Default is the squared-distance variant: mean over a of the squared
    nearest-neighbor distance into b, plus the same with roles swapped.
    ``squared=False`` averages plain distances instead. Exact either
    way; large products of sizes switch to a grid-backed search.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for c in (a, b):
        if c.ndim != 2 or c.shape[1] != 3 or len(c) == 0:
            raise DataError(f"expected nonempty (N, 3) cloud, got {c.shape}")
    if len(a) * len(b) <= _BRUTE_LIMIT:
        d_ab, d_ba = _nn_sq_brute(a, b), _nn_sq_brute(b, a)
    else:
        ga, gb = _PointGrid(a), _PointGrid(b)
        d_ab = np.array([gb.query_sq(q) for q in a])
        d_ba = np.array([ga.query_sq(q) for q in b])
    if not squared:
        d_ab, d_ba = np.sqrt(d_ab), np.sqrt(d_ba)
    return float(d_ab.mean() + d_ba.mean())


def part_accuracy(per_fragment_cd, threshold: float) -> float:
    """Percentage of fragments whose placement Chamfer beats the threshold."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    cds = list(per_fragment_cd)
    if not cds:
        raise ValueError("no fragments to score")
    return 100.0 * sum(1 for cd in cds if cd < threshold) / len(cds)


def evaluate(
    obj: UnassembledObject,
    pred_poses: list[RigidTransform],
    anchor: int | None = None,
    pa_threshold: float = 0.01,
    squared: bool = True,
) -> AssemblyReport:
    """Score predicted poses for one object against its ground truth."""
    if obj.gt_poses is None:
        raise DataError("object has no gt_poses to evaluate against")
    if len(pred_poses) != len(obj.fragments):
        raise DataError(
            f"pose count {len(pred_poses)} does not match "
            f"{len(obj.fragments)} fragments"
        )
    if anchor is None:
        anchor = anchor_index(obj)

    inv_p = pred_poses[anchor].inverse()
    inv_g = obj.gt_poses[anchor].inverse()
    rel_p = [inv_p.compose(g) for g in pred_poses]
    rel_g = [inv_g.compose(g) for g in obj.gt_poses]

    per_fragment = []
    rot_errs, tr_errs, tr_errs_mm, cds = [], [], [], []
    pred_clouds, gt_clouds = [], []
    for i, f in enumerate(obj.fragments):
        re = rotation_error_deg(rel_p[i].rotation, rel_g[i].rotation)
        te = float(np.linalg.norm(rel_p[i].translation - rel_g[i].translation))
        pc = apply_transform(rel_p[i], f.positions)[0]
        gc = apply_transform(rel_g[i], f.positions)[0]
        cd = chamfer_distance(pc, gc, squared=squared)
        per_fragment.append((re, te, cd))
        pred_clouds.append(pc)
        gt_clouds.append(gc)
        if i != anchor:
            rot_errs.append(re)
            tr_errs.append(te)
            tr_errs_mm.append(te * f.scale)
            cds.append(cd)

    if not rot_errs:  # single-fragment object: anchor only, nothing predicted
        rmse_r = rmse_t = rmse_mm = 0.0
        pa = 100.0
    else:
        rmse_r = float(np.sqrt(np.mean(np.square(rot_errs))))
        rmse_t = float(np.sqrt(np.mean(np.square(tr_errs))))
        rmse_mm = float(np.sqrt(np.mean(np.square(tr_errs_mm))))
        pa = part_accuracy(cds, pa_threshold)
    whole = chamfer_distance(
        np.concatenate(pred_clouds), np.concatenate(gt_clouds), squared=squared
    )
    return AssemblyReport(
        rmse_rot_deg=rmse_r,
        rmse_trans=rmse_t,
        part_accuracy_pct=pa,
        chamfer=whole,
        per_fragment=per_fragment,
        rmse_trans_mm=rmse_mm,
    )


def summarize(reports: list[AssemblyReport]) -> AssemblyReport:
    """Pool per-object reports into one summary row.

    RMSE columns pool the underlying per-fragment errors (square-mean-
    root over everything predicted), not a mean of per-object RMSEs;
    part accuracy likewise counts fragments, and Chamfer averages the
    per-object whole-assembly values.
    """
    if not reports:
        raise ValueError("no reports to summarize")
    sq_r, sq_t, n = 0.0, 0.0, 0
    hits, total = 0, 0
    for rep in reports:
        k = max(len(rep.per_fragment) - 1, 0)  # anchor carries no error
        n += k
        sq_r += rep.rmse_rot_deg**2 * k
        sq_t += rep.rmse_trans**2 * k
        hits += round(rep.part_accuracy_pct / 100.0 * k)
        total += k
    rmse_r = float(np.sqrt(sq_r / n)) if n else 0.0
    rmse_t = float(np.sqrt(sq_t / n)) if n else 0.0
    pa = 100.0 * hits / total if total else 100.0
    return AssemblyReport(
        rmse_rot_deg=rmse_r,
        rmse_trans=rmse_t,
        part_accuracy_pct=pa,
        chamfer=float(np.mean([r.chamfer for r in reports])),
        per_fragment=[],
    )


def report_rows(named: list[tuple[str, AssemblyReport]]):
    """Fixed-column rows for emission: one per object plus a summary."""
    rows = []
    for name, rep in named:
        rows.append(
            {
                "object": name,
                "rmse_rot_deg": rep.rmse_rot_deg,
                "rmse_trans": rep.rmse_trans,
                "pa_pct": rep.part_accuracy_pct,
                "chamfer": rep.chamfer,
            }
        )
    summary = summarize([rep for _, rep in named])
    rows.append(
        {
            "object": "summary",
            "rmse_rot_deg": summary.rmse_rot_deg,
            "rmse_trans": summary.rmse_trans,
            "pa_pct": summary.part_accuracy_pct,
            "chamfer": summary.chamfer,
        }
    )
    return rows


def write_report_csv(path, named: list[tuple[str, AssemblyReport]]) -> None:
    import csv

    rows = report_rows(named)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["object", "rmse_rot_deg", "rmse_trans", "pa_pct", "chamfer"]
        )
        writer.writeheader()
        writer.writerows(rows)


def write_report_json(path, named: list[tuple[str, AssemblyReport]]) -> None:
    import json

    with open(path, "w") as fh:
        json.dump(report_rows(named), fh, indent=2)
        fh.write("\n")
