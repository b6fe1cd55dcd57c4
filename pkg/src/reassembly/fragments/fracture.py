"""Synthetic fracture generation.

An object is a convex primitive sampled on its surface, broken by a
sequence of noisy planar cuts. Every cut adds one shared set of points
on the fracture surface to both resulting fragments, so ground-truth
reassembly brings those copies exactly into coincidence and boundary
labels are recoverable from geometry alone.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ConfigError, DataError
from ..liegroup import RigidTransform, random_rotation
from .core import Fragment, UnassembledObject

_U64 = np.uint64
_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_PX = _U64(0x8DA6B343EC53F7D9)
_PY = _U64(0xD8163841E869D14F)
_PZ = _U64(0x61C8864680B583EB)


def _mix(h: np.ndarray) -> np.ndarray:
    h = (h ^ (h >> _U64(30))) * _MIX1
    h = (h ^ (h >> _U64(27))) * _MIX2
    return h ^ (h >> _U64(31))


def _lattice_values(ix, iy, iz, salt: int) -> np.ndarray:
    h = _mix(ix.astype(np.int64).view(_U64) * _PX
             ^ iy.astype(np.int64).view(_U64) * _PY
             ^ iz.astype(np.int64).view(_U64) * _PZ
             ^ _U64((salt + _GOLDEN) & _MASK))
    return h.astype(np.float64) * (1.0 / 2.0**64)


class ValueNoise3:
    """Smooth deterministic scalar noise over R^3 in [0, 1].

    Lattice values come from an integer hash, blended with a quintic
    fade, so evaluation depends only on (seed, coordinates) and is
    reproducible across runs and platforms.
    """

    def __init__(self, seed: int, frequency: float = 1.0, octaves: int = 1,
                 persistence: float = 0.5):
        self.salt = seed & _MASK
        self.frequency = float(frequency)
        self.octaves = int(octaves)
        self.persistence = float(persistence)

    def _single(self, p: np.ndarray, salt: int) -> np.ndarray:
        cell = np.floor(p)
        f = p - cell
        cell = cell.astype(np.int64)
        s = f * f * f * (f * (f * 6.0 - 15.0) + 10.0)
        out = np.zeros(len(p))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    v = _lattice_values(cell[:, 0] + dx, cell[:, 1] + dy,
                                        cell[:, 2] + dz, salt)
                    w = ((s[:, 0] if dx else 1.0 - s[:, 0])
                         * (s[:, 1] if dy else 1.0 - s[:, 1])
                         * (s[:, 2] if dz else 1.0 - s[:, 2]))
                    out += w * v
        return out

    def __call__(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        total = np.zeros(len(p))
        amp = 1.0
        norm = 0.0
        for k in range(self.octaves):
            salt = (self.salt + k * 0xA24BAED4963EE407) & _MASK
            offset = float(k) * 19.19
            total += amp * self._single(p * (self.frequency * 2.0**k) + offset, salt)
            norm += amp
            amp *= self.persistence
        return total / norm


class _Primitive:
    """Convex base solid: surface sampler plus membership test."""

    kind = ""

    def area(self) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int):
        raise NotImplementedError

    def inside(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _Cube(_Primitive):
    kind = "cube"

    def __init__(self, rng):
        self.half = rng.uniform(0.6, 1.0, size=3)

    def area(self) -> float:
        a, b, c = self.half
        return 8.0 * (a * b + a * c + b * c)

    def sample(self, rng, n):
        a, b, c = self.half
        face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b]) * 4.0
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 2))
        pos = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        for face in range(6):
            m = faces == face
            axis, sign = divmod(face, 2)
            sign = 1.0 if sign == 0 else -1.0
            others = [i for i in range(3) if i != axis]
            pos[m, axis] = sign * self.half[axis]
            pos[m, others[0]] = u[m, 0] * self.half[others[0]]
            pos[m, others[1]] = u[m, 1] * self.half[others[1]]
            nrm[m, axis] = sign
        return pos, nrm

    def inside(self, x):
        return np.all(np.abs(x) <= self.half + 1e-12, axis=1)


class _Sphere(_Primitive):
    kind = "sphere"

    def __init__(self, rng):
        self.radius = rng.uniform(0.7, 1.0)

    def area(self) -> float:
        return 4.0 * math.pi * self.radius**2

    def sample(self, rng, n):
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return self.radius * u, u

    def inside(self, x):
        return np.linalg.norm(x, axis=1) <= self.radius + 1e-12


class _Cylinder(_Primitive):
    kind = "cylinder"

    def __init__(self, rng):
        self.radius = rng.uniform(0.5, 0.9)
        self.half_height = rng.uniform(0.6, 1.0)

    def area(self) -> float:
        return 2.0 * math.pi * self.radius * (2.0 * self.half_height + self.radius)

    def sample(self, rng, n):
        r, h = self.radius, self.half_height
        lateral = 4.0 * math.pi * r * h
        caps = 2.0 * math.pi * r * r
        on_side = rng.uniform(size=n) < lateral / (lateral + caps)
        phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
        pos = np.empty((n, 3))
        nrm = np.empty((n, 3))
        m = on_side
        pos[m, 0] = r * np.cos(phi[m])
        pos[m, 1] = r * np.sin(phi[m])
        pos[m, 2] = rng.uniform(-h, h, size=int(m.sum()))
        nrm[m] = np.stack([np.cos(phi[m]), np.sin(phi[m]), np.zeros(int(m.sum()))], axis=1)
        m = ~on_side
        rad = r * np.sqrt(rng.uniform(size=int(m.sum())))
        sign = np.where(rng.uniform(size=int(m.sum())) < 0.5, 1.0, -1.0)
        pos[m, 0] = rad * np.cos(phi[m])
        pos[m, 1] = rad * np.sin(phi[m])
        pos[m, 2] = sign * h
        nrm[m] = np.stack([np.zeros_like(sign), np.zeros_like(sign), sign], axis=1)
        return pos, nrm

    def inside(self, x):
        radial = np.hypot(x[:, 0], x[:, 1]) <= self.radius + 1e-12
        return radial & (np.abs(x[:, 2]) <= self.half_height + 1e-12)


class _Slab(_Primitive):
    """Convex polygon extruded along z."""

    kind = "slab"

    def __init__(self, rng):
        k = int(rng.integers(5, 9))
        angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=k))
        radii = rng.uniform(0.6, 1.0, size=k)
        self.verts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        self.half_height = rng.uniform(0.3, 0.6)
        nxt = np.roll(self.verts, -1, axis=0)
        cross = self.verts[:, 0] * nxt[:, 1] - self.verts[:, 1] * nxt[:, 0]
        self.poly_area = 0.5 * float(np.abs(cross.sum()))
        edges = nxt - self.verts
        self.edge_len = np.linalg.norm(edges, axis=1)
        # outward edge normals for a counterclockwise polygon
        self.edge_nrm = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
        self.edge_nrm /= self.edge_len[:, None]

    def area(self) -> float:
        return 2.0 * self.poly_area + 2.0 * self.half_height * float(self.edge_len.sum())

    def _sample_polygon(self, rng, n):
        # fan triangulation around the centroid, triangles weighted by area
        c = self.verts.mean(axis=0)
        a = self.verts - c
        b = np.roll(self.verts, -1, axis=0) - c
        tri_area = 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        tri = rng.choice(len(a), size=n, p=tri_area / tri_area.sum())
        u = rng.uniform(size=(n, 2))
        flip = u.sum(axis=1) > 1.0
        u[flip] = 1.0 - u[flip]
        return c + u[:, :1] * a[tri] + u[:, 1:] * b[tri]

    def sample(self, rng, n):
        side_area = 2.0 * self.half_height * self.edge_len
        weights = np.concatenate([[self.poly_area, self.poly_area], side_area])
        part = rng.choice(len(weights), size=n, p=weights / weights.sum())
        pos = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        for cap, sign in ((0, 1.0), (1, -1.0)):
            m = part == cap
            pos[m, :2] = self._sample_polygon(rng, int(m.sum()))
            pos[m, 2] = sign * self.half_height
            nrm[m, 2] = sign
        nxt = np.roll(self.verts, -1, axis=0)
        for e in range(len(self.verts)):
            m = part == e + 2
            cnt = int(m.sum())
            t = rng.uniform(size=(cnt, 1))
            pos[m, :2] = self.verts[e] + t * (nxt[e] - self.verts[e])
            pos[m, 2] = rng.uniform(-self.half_height, self.half_height, size=cnt)
            nrm[m, :2] = self.edge_nrm[e]
        return pos, nrm

    def inside(self, x):
        inside_z = np.abs(x[:, 2]) <= self.half_height + 1e-12
        rel = x[:, None, :2] - self.verts[None, :, :]
        dots = np.einsum("nek,ek->ne", rel, self.edge_nrm)
        return inside_z & np.all(dots <= 1e-12, axis=1)


_PRIMITIVES = {"cube": _Cube, "sphere": _Sphere, "cylinder": _Cylinder, "slab": _Slab}


class _Cut:
    """One noisy planar cut: F(x) = n.(x - p0) + rho(x), split at F = 0."""

    def __init__(self, p0, normal, noise: ValueNoise3, amplitude: float):
        self.p0 = p0
        self.normal = normal
        self.noise = noise
        self.amplitude = amplitude

    def field(self, x: np.ndarray) -> np.ndarray:
        rho = self.amplitude * (2.0 * self.noise(x) - 1.0)
        return (x - self.p0) @ self.normal + rho

    def gradient(self, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
        g = np.empty_like(x)
        for axis in range(3):
            dx = np.zeros(3)
            dx[axis] = h
            g[:, axis] = (self.field(x + dx) - self.field(x - dx)) / (2.0 * h)
        return g


class _Piece:
    """Mutable fragment under construction, in assembled coordinates."""

    def __init__(self, positions, normals, boundary, constraints):
        self.positions = positions
        self.normals = normals
        self.boundary = boundary
        self.constraints = constraints  # [(cut, sign)] membership tests

    def admits(self, x: np.ndarray) -> np.ndarray:
        ok = np.ones(len(x), dtype=bool)
        for cut, sign in self.constraints:
            ok &= sign * cut.field(x) > 0.0
        return ok


def _interface_points(rng, cut: _Cut, piece: _Piece, prim: _Primitive,
                      density: float) -> tuple[np.ndarray, np.ndarray]:
    """Sample the new fracture surface inside the piece at the given density."""
    n = cut.normal
    basis = np.eye(3)[np.argmin(np.abs(n))]
    e_u = np.cross(n, basis)
    e_u /= np.linalg.norm(e_u)
    e_v = np.cross(n, e_u)
    rel = piece.positions - cut.p0
    u = rel @ e_u
    v = rel @ e_v
    lo_u, hi_u = u.min() - 0.05, u.max() + 0.05
    lo_v, hi_v = v.min() - 0.05, v.max() + 0.05
    count = int(math.ceil(density * (hi_u - lo_u) * (hi_v - lo_v)))
    count = min(count, 200_000)
    uv = rng.uniform(size=(count, 2))
    x = (cut.p0
         + (lo_u + uv[:, :1] * (hi_u - lo_u)) * e_u
         + (lo_v + uv[:, 1:] * (hi_v - lo_v)) * e_v)
    for _ in range(4):
        x = x - cut.field(x)[:, None] * n
    keep = prim.inside(x) & piece.admits(x) & (np.abs(cut.field(x)) < 1e-3)
    x = x[keep]
    grad = cut.gradient(x)
    grad /= np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)
    return x, grad


def _split_piece(rng, piece: _Piece, prim: _Primitive, cut: _Cut,
                 density: float, min_points: int):
    """Apply one cut; returns (negative side, positive side) or None if degenerate."""
    f = cut.field(piece.positions)
    neg = f < 0.0
    pos = ~neg
    if min(int(neg.sum()), int(pos.sum())) < min_points:
        return None
    surf, grad = _interface_points(rng, cut, piece, prim, density)
    if len(surf) < 3:
        return None
    ones = np.ones(len(surf), dtype=np.uint8)
    lo = _Piece(
        np.concatenate([piece.positions[neg], surf]),
        np.concatenate([piece.normals[neg], grad]),
        np.concatenate([piece.boundary[neg], ones]),
        piece.constraints + [(cut, -1.0)],
    )
    hi = _Piece(
        np.concatenate([piece.positions[pos], surf.copy()]),
        np.concatenate([piece.normals[pos], -grad]),
        np.concatenate([piece.boundary[pos], ones]),
        piece.constraints + [(cut, 1.0)],
    )
    return lo, hi


def generate_fracture(n_fragments: int, n_points: int = 5000, seed: int = 0,
                      primitive: str | None = None, roughness: float = 0.05,
                      min_frac: float = 0.05, max_tries: int = 100,
                      ) -> tuple[UnassembledObject, float]:
    """Build one fractured object.

    Returns (object, scale) where scale restores normalized coordinates
    to the primitive's original units. Fragments come out centered with
    ground-truth poses (I, centroid); orientations stay canonical, use
    perturb() to randomize them. Raises DataError when max_tries cut
    attempts cannot satisfy min_frac.
    """
    if n_fragments < 2:
        raise ConfigError(f"n_fragments must be >= 2, got {n_fragments}")
    if n_points < 16 * n_fragments:
        raise ConfigError(f"n_points={n_points} too small for {n_fragments} fragments")
    if not 0.0 < min_frac <= 1.0:
        raise ConfigError(f"min_frac must be in (0, 1], got {min_frac}")
    rng = np.random.default_rng(seed)
    if primitive is None:
        primitive = ["cube", "sphere", "cylinder", "slab"][int(rng.integers(4))]
    if primitive not in _PRIMITIVES:
        raise ConfigError(f"unknown primitive {primitive!r}, expected one of "
                          f"{sorted(_PRIMITIVES)}")
    prim = _PRIMITIVES[primitive](rng)
    positions, normals = prim.sample(rng, n_points)
    density = n_points / prim.area()
    radius = float(np.linalg.norm(positions, axis=1).max())
    min_points = max(3, int(math.ceil(min_frac * n_points)))

    pieces = [_Piece(positions, normals,
                     np.zeros(n_points, dtype=np.uint8), [])]
    cut_salt = 1
    while len(pieces) < n_fragments:
        target = max(range(len(pieces)), key=lambda i: len(pieces[i].positions))
        piece = pieces[target]
        split = None
        for _ in range(max_tries):
            centroid = piece.positions.mean(axis=0)
            anchor = piece.positions[int(rng.integers(len(piece.positions)))]
            p0 = centroid + rng.uniform(0.1, 0.9) * (anchor - centroid)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            noise = ValueNoise3(seed ^ (0x5EED << 8) ^ cut_salt,
                                frequency=2.5 / radius, octaves=2)
            cut = _Cut(p0, n, noise, roughness * radius)
            cut_salt += 1
            split = _split_piece(rng, piece, prim, cut, density, min_points)
            if split is not None:
                break
        if split is None:
            raise DataError(
                f"no valid cut after {max_tries} tries (fragment {target}, "
                f"min_frac={min_frac})")
        pieces[target:target + 1] = list(split)

    scale = float(max(np.linalg.norm(p.positions, axis=1).max() for p in pieces))
    color_noise = [ValueNoise3((seed << 2) | ch, frequency=2.5, octaves=3)
                   for ch in range(3)]
    fragments = []
    gt_poses = []
    for piece in pieces:
        assembled = piece.positions / scale
        colors = np.stack([0.15 + 0.7 * cn(assembled) for cn in color_noise], axis=1)
        centroid = assembled.mean(axis=0)
        local = assembled - centroid
        frag_scale = scale * float(np.linalg.norm(local, axis=1).max())
        fragments.append(Fragment(local, piece.normals, colors,
                                  boundary_label=piece.boundary, scale=frag_scale))
        gt_poses.append(RigidTransform(np.eye(3), centroid))
    return UnassembledObject(fragments, gt_poses), scale


def perturb(obj: UnassembledObject, seed: int = 0) -> UnassembledObject:
    """Re-express each fragment in a random orientation about its centroid.

    Ground-truth poses absorb the rotation, so assembled_positions() is
    unchanged up to rounding.
    """
    if obj.gt_poses is None:
        raise ConfigError("perturb needs ground-truth poses")
    rng = np.random.default_rng(seed)
    fragments = []
    poses = []
    for f, g in zip(obj.fragments, obj.gt_poses):
        rot = random_rotation(rng)
        fragments.append(replace(f, positions=f.positions @ rot,
                                 normals=f.normals @ rot))
        poses.append(g.compose(RigidTransform(rot, np.zeros(3))))
    return UnassembledObject(fragments, poses)


def label_fracture_boundary(obj: UnassembledObject, eps: float = 1e-6) -> list[np.ndarray]:
    """Mark points lying within eps of any other fragment, assembled.

    Fracture surfaces carry coincident point copies on both sides, so
    the construction labels are recovered exactly for generated data.
    """
    if obj.gt_poses is None:
        raise ConfigError("label_fracture_boundary needs ground-truth poses")
    assembled = [g.rotation @ f.positions.T + g.translation[:, None]
                 for f, g in zip(obj.fragments, obj.gt_poses)]
    assembled = [a.T for a in assembled]
    trees = [cKDTree(a) for a in assembled]
    labels = [np.zeros(len(a), dtype=np.uint8) for a in assembled]
    for i in range(len(assembled)):
        for j in range(len(assembled)):
            if i == j:
                continue
            d, _ = trees[j].query(assembled[i], k=1)
            labels[i] |= (d <= eps).astype(np.uint8)
    return labels
