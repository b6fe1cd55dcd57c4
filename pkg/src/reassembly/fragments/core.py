"""Fragment and object data model, centering, and density-aware sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from ..liegroup import RigidTransform, apply_transform

CENTER_TOL = 1e-6
NORMAL_TOL = 1e-4


@dataclass
class Fragment:
    """A centered colored point cloud.

    positions are scene-unit coordinates in the fragment's local frame
    (centroid at the origin once centered); normals are unit direction
    channels; colors are RGB in [0, 1]. ``scale`` keeps the fragment's
    original bounding radius from before any object normalization so
    metric units can be restored later.
    """

    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    boundary_label: np.ndarray | None = None
    scale: float = 1.0
    colors_defaulted: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        n = len(self.positions)
        if self.positions.shape != (n, 3) or self.normals.shape != (n, 3) or self.colors.shape != (n, 3):
            raise ValueError(
                f"inconsistent fragment arrays: positions {self.positions.shape}, "
                f"normals {self.normals.shape}, colors {self.colors.shape}"
            )
        if self.boundary_label is not None:
            self.boundary_label = np.asarray(self.boundary_label, dtype=np.uint8)
            if self.boundary_label.shape != (n,):
                raise ValueError(f"boundary_label shape {self.boundary_label.shape} != ({n},)")

    def __len__(self) -> int:
        return len(self.positions)

    def validate(self, centered: bool = True) -> None:
        """Assert the type invariants; raises ValueError on violation."""
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        if centered and len(self) and np.max(np.abs(self.positions.mean(axis=0))) >= CENTER_TOL:
            raise ValueError("fragment is not centered")
        norms = np.linalg.norm(self.normals, axis=1)
        if len(self) and np.max(np.abs(norms - 1.0)) > NORMAL_TOL:
            raise ValueError("normals are not unit length")
        if np.min(self.colors) < 0.0 or np.max(self.colors) > 1.0:
            raise ValueError("colors outside [0, 1]")
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")

    def take(self, idx: np.ndarray) -> "Fragment":
        """Subset by point indices, keeping all per-point channels aligned."""
        return replace(
            self,
            positions=self.positions[idx],
            normals=self.normals[idx],
            colors=self.colors[idx],
            boundary_label=None if self.boundary_label is None else self.boundary_label[idx],
        )


@dataclass
class UnassembledObject:
    """A set of centered fragments, optionally with ground-truth poses.

    ``gt_poses[i]`` maps fragment i's local coordinates into the shared
    assembled frame. Generated and training data always carry poses;
    inference input may not. Reassembly uses two or more fragments, but
    single-fragment instances are allowed for degenerate queries.
    """

    fragments: list[Fragment]
    gt_poses: list[RigidTransform] | None = None

    def __post_init__(self):
        if self.gt_poses is not None and len(self.gt_poses) != len(self.fragments):
            raise ValueError("gt_poses length does not match fragment count")

    def assembled_positions(self) -> np.ndarray:
        """Union cloud under gt_poses (requires poses)."""
        if self.gt_poses is None:
            raise ValueError("object has no gt_poses")
        parts = [
            apply_transform(g, f.positions)[0]
            for g, f in zip(self.gt_poses, self.fragments)
        ]
        return np.concatenate(parts, axis=0)


def center_fragment(f: Fragment) -> tuple[Fragment, np.ndarray]:
    """Shift the centroid to the origin; returns the shift for bookkeeping."""
    centroid = f.positions.mean(axis=0) if len(f) else np.zeros(3)
    return replace(f, positions=f.positions - centroid), centroid


def content_hash(f: Fragment) -> str:
    """Deterministic digest of a fragment's geometry, used for tie-breaks."""
    rounded = np.round(f.positions, 9)
    return hashlib.sha256(rounded.tobytes()).hexdigest()


def anchor_index(obj: UnassembledObject) -> int:
    """Reference fragment: most points; ties broken by content digest."""
    keys = [(-len(f), content_hash(f)) for f in obj.fragments]
    return int(min(range(len(keys)), key=keys.__getitem__))


def fps_indices(points: np.ndarray, n: int) -> np.ndarray:
    """Farthest-point sampling, seeded at the point farthest from the centroid.

    Fully deterministic: ties resolve to the lowest index. O(N*n).
    """
    points = np.asarray(points, dtype=np.float64)
    total = len(points)
    if n >= total:
        return np.arange(total)
    start = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def sample_points(f: Fragment, n: int, seed: int = 0) -> Fragment:
    """Farthest-point downsample of one fragment.

    Selection is fully deterministic (centroid-farthest start); the seed
    is part of the interface for callers that batch over objects.
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    idx = fps_indices(f.positions, n)
    return f.take(idx)


def proportional_counts(sizes: list[int], n_total: int) -> list[int]:
    """Largest-remainder allocation of n_total across fragments by mass."""
    total = sum(sizes)
    raw = [n_total * s / total for s in sizes]
    counts = [int(np.floor(r)) for r in raw]
    # Every fragment keeps at least one point.
    for i, s in enumerate(sizes):
        if counts[i] == 0 and s > 0:
            counts[i] = 1
    remainder = n_total - sum(counts)
    order = sorted(range(len(sizes)), key=lambda i: (raw[i] - np.floor(raw[i])), reverse=True)
    i = 0
    while remainder != 0 and sizes:
        j = order[i % len(order)]
        step = 1 if remainder > 0 else -1
        if counts[j] + step >= 1 and counts[j] + step <= sizes[j]:
            counts[j] += step
            remainder -= step
        i += 1
    return counts


def sample_object_points(obj: UnassembledObject, n_total: int, seed: int = 0) -> UnassembledObject:
    """Uniform-density downsample across fragments (counts proportional to mass).

    Fragments are re-centered after subsampling and poses are updated so
    reassembly still reproduces the (downsampled) source exactly.
    """
    sizes = [len(f) for f in obj.fragments]
    counts = proportional_counts(sizes, n_total)
    new_frags: list[Fragment] = []
    new_poses: list[RigidTransform] | None = [] if obj.gt_poses is not None else None
    for k, (f, n) in enumerate(zip(obj.fragments, counts)):
        sub = sample_points(f, n, seed)
        sub, shift = center_fragment(sub)
        new_frags.append(sub)
        if new_poses is not None:
            g = obj.gt_poses[k]
            new_poses.append(g.compose(RigidTransform(np.eye(3), shift)))
    return UnassembledObject(new_frags, new_poses)
