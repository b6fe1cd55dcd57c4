"""Conditional flow matching on SE(3).

Training pairs interpolate a random initial pose toward the ground-truth
pose along the rotation geodesic (translations linearly); the regression
target is the geodesic residual scaled by 1/(1-t), which is constant
along the conditional path. A cross-fragment transformer predicts one
tangent vector per fragment; inference integrates the field with
explicit Euler steps on the manifold.

All poses here are expressed relative to the object's anchor fragment,
whose target pose is the identity and whose supervised velocity is zero.
That removes the global gauge freedom of the assembly problem.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import FragmentEncoder, positional_encoding
from .errors import ConfigError, TrainingDiverged
from .fragments.core import (
    Fragment,
    UnassembledObject,
    anchor_index,
    fps_indices,
    sample_points,
)
from .liegroup import (
    RigidTransform,
    TangentVector,
    geodesic_rotation,
    lerp_translation,
    project_rotation,
    relative_log,
    sample_initial_pose,
    so3_exp,
)

DRIFT_TOL = 1e-5

_HAT_BASIS = np.array([
    [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
])


@dataclass
class FlowSample:
    """One supervised point on a conditional geodesic path."""

    g0: RigidTransform
    g1: RigidTransform
    t: float
    gt: RigidTransform
    target: TangentVector


def make_flow_sample(g1: RigidTransform, t: float,
                     rng: np.random.Generator) -> FlowSample:
    """Draw g0 from the initial-pose law and interpolate toward g1 at t.

    The residual targets are divided by (1-t); along the conditional
    path this equals the constant pair residual, so t must stay < 1.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t={t} outside [0, 1); residual scaling diverges at 1")
    g0 = sample_initial_pose(rng)
    rt = geodesic_rotation(g0.rotation, g1.rotation, t)
    bt = lerp_translation(g0.translation, g1.translation, t)
    target = TangentVector(
        rotational=relative_log(rt, g1.rotation) / (1.0 - t),
        translational=(g1.translation - bt) / (1.0 - t),
    )
    return FlowSample(g0, g1, t, RigidTransform(rt, bt), target)


def anchor_flow_sample(t: float) -> FlowSample:
    """The anchor's path: pinned at identity with zero target velocity."""
    ident = RigidTransform.identity()
    return FlowSample(ident, ident, t, ident,
                      TangentVector(np.zeros(3), np.zeros(3)))


def _as_graph(x, like_dtype) -> T.Array:
    if isinstance(x, T.Array):
        return x
    return T.constant(np.asarray(x, dtype=like_dtype))


def flow_loss(preds: list[TangentVector], samples: list[FlowSample],
              lam: float = 1.0) -> T.Array:
    """Mean over fragments of |v_b - target_b|^2 + lam * |v_R - target_R|^2."""
    if len(preds) != len(samples):
        raise ValueError(f"{len(preds)} predictions for {len(samples)} samples")
    if not preds:
        raise ValueError("flow_loss needs at least one fragment")
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    dtype = (preds[0].rotational.dtype
             if isinstance(preds[0].rotational, T.Array) else np.float64)
    terms = []
    for p, s in zip(preds, samples):
        vr = _as_graph(p.rotational, dtype)
        vb = _as_graph(p.translational, dtype)
        tr = T.constant(np.asarray(s.target.rotational, dtype=dtype))
        tb = T.constant(np.asarray(s.target.translational, dtype=dtype))
        term = T.add(T.sum_(T.square(T.sub(vb, tb))),
                     T.mul(T.sum_(T.square(T.sub(vr, tr))), lam))
        terms.append(T.reshape(term, (1,)))
    return T.mean(T.concat(terms, axis=0))


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    m = np.asarray(r, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0.0 else -q


def rodrigues_graph(w: T.Array, eps: float = 1e-9) -> T.Array:
    """In-graph exponential map: axis-angle (3,) -> rotation (3, 3).

    Used where gradients must flow through the rotation update (the
    extrapolated-pose overlap penalty). The epsilon regularizes theta at
    zero; the bias is far below training noise.
    """
    dtype = w.dtype
    basis = T.constant(_HAT_BASIS.astype(dtype))
    k = T.sum_(T.mul(T.reshape(w, (3, 1, 1)), basis), axis=0)
    theta2 = T.sum_(T.square(w))
    theta = T.sqrt(T.add(theta2, eps))
    a = T.div(T.sin(theta), theta)
    b = T.div(T.sub(1.0, T.cos(theta)), T.add(theta2, eps))
    eye = T.constant(np.eye(3, dtype=dtype))
    return T.add(eye, T.add(T.mul(k, a), T.mul(T.matmul(k, k), b)))


def endpoint_field(q_raw: T.Array, b_end: T.Array, q_now: np.ndarray,
                   b_now: np.ndarray, inv_rem: np.ndarray
                   ) -> tuple[T.Array, T.Array]:
    """Conditional field from a predicted endpoint pose, in-graph.

    q_raw (M, 4) is an unnormalized endpoint quaternion per row and
    b_end (M, 3) the endpoint translation; q_now/b_now are the current
    poses as plain arrays (constants under differentiation) and inv_rem
    holds 1/(1-t) per row. Returns rotational and translational field
    values (M, 3): log of the remaining motion divided by the remaining
    time, so a step of size (1-t) lands exactly on the endpoint.

    The residual conj(q_now)*q_hat is computed componentwise because the
    left factor is constant, its hemisphere is fixed by a smooth sign
    (w >= 0 keeps the principal log), and the angle comes from
    2*atan2(|xyz|, w), exact at the small-angle and near-pi ends alike.
    """
    dt = q_raw.data.dtype
    eps = 1e-6 if dt == np.float32 else 1e-12
    qn = T.sqrt(T.add(T.sum_(T.square(q_raw), axis=1, keepdims=True), eps))
    q_hat = T.div(q_raw, qn)

    qc = np.asarray(q_now, dtype=dt)
    aw = T.constant(qc[:, 0:1])
    ax = T.constant(-qc[:, 1:2])
    ay = T.constant(-qc[:, 2:3])
    az = T.constant(-qc[:, 3:4])
    bw = T.slice_axis(q_hat, 1, 0, 1)
    bx = T.slice_axis(q_hat, 1, 1, 2)
    by = T.slice_axis(q_hat, 1, 2, 3)
    bz = T.slice_axis(q_hat, 1, 3, 4)
    rw = T.sub(T.mul(aw, bw),
               T.add(T.mul(ax, bx), T.add(T.mul(ay, by), T.mul(az, bz))))
    rx = T.add(T.add(T.mul(aw, bx), T.mul(ax, bw)),
               T.sub(T.mul(ay, bz), T.mul(az, by)))
    ry = T.add(T.sub(T.mul(aw, by), T.mul(ax, bz)),
               T.add(T.mul(ay, bw), T.mul(az, bx)))
    rz = T.add(T.add(T.mul(aw, bz), T.mul(ax, by)),
               T.sub(T.mul(az, bw), T.mul(ay, bx)))

    sgn = T.div(rw, T.sqrt(T.add(T.square(rw), eps)))
    rw = T.mul(rw, sgn)
    rxyz = T.mul(T.concat([rx, ry, rz], axis=1), sgn)
    nv = T.sqrt(T.add(T.sum_(T.square(rxyz), axis=1, keepdims=True), eps))
    ang_over_n = T.div(T.mul(T.atan2(nv, rw), 2.0), nv)

    inv = T.constant(np.asarray(inv_rem, dtype=dt).reshape(-1, 1))
    v_rot = T.mul(T.mul(rxyz, ang_over_n), inv)
    bt = T.constant(np.asarray(b_now, dtype=dt))
    v_tr = T.mul(T.sub(b_end, bt), inv)
    return v_rot, v_tr


def _polar3_cols(m: list[list[T.Array]], iters: int = 8) -> list[list[T.Array]]:
    """Batched nearest-rotation projection of per-row 3x3 matrices.

    m[j][k] holds entry (j,k) for every row as an (M,1) column, so the
    whole batch shares one graph. The matrix is scale-normalized, its
    cofactor matrix added (same singular frame; lifts the weakest axis
    with the proper-rotation sign, since correspondence clouds from a
    fracture line are nearly planar), then Newton-Schulz iterations
    X <- X(3I - X^T X)/2 converge to the polar factor. All ops are
    componentwise or tiny sums: differentiable and free of any
    factorization. Zero input is a fixed point and stays zero.
    """

    def renorm(mat, target):
        fro = None
        for j in range(3):
            for k in range(3):
                sq = T.square(mat[j][k])
                fro = sq if fro is None else T.add(fro, sq)
        scale = T.div(target, T.sqrt(T.add(fro, 0.01)))
        return [[T.mul(mat[j][k], scale) for k in range(3)] for j in range(3)]

    m = renorm(m, np.sqrt(2.0))
    cof = [[None] * 3 for _ in range(3)]
    for j in range(3):
        for k in range(3):
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            k1, k2 = (k + 1) % 3, (k + 2) % 3
            cof[j][k] = T.sub(T.mul(m[j1][k1], m[j2][k2]),
                              T.mul(m[j1][k2], m[j2][k1]))
    m = [[T.add(m[j][k], cof[j][k]) for k in range(3)] for j in range(3)]
    m = renorm(m, np.sqrt(3.0))
    for _ in range(iters):
        y = [[None] * 3 for _ in range(3)]
        for a in range(3):
            for b in range(a, 3):
                s = T.add(T.add(T.mul(m[0][a], m[0][b]),
                                T.mul(m[1][a], m[1][b])),
                          T.mul(m[2][a], m[2][b]))
                y[a][b] = y[b][a] = s
        z = [[T.sub(3.0 if a == b else 0.0, y[a][b]) for b in range(3)]
             for a in range(3)]
        m = [[T.mul(T.add(T.add(T.mul(m[j][0], z[0][k]),
                                T.mul(m[j][1], z[1][k])),
                          T.mul(m[j][2], z[2][k])), 0.5)
              for k in range(3)] for j in range(3)]
    return m


def _quat_rotate_rows(v: T.Array, q: T.Array) -> T.Array:
    """Rotate each (M,3) row vector by the matching (M,4) unit quaternion."""
    w = T.slice_axis(q, 1, 0, 1)
    u = [T.slice_axis(q, 1, j, j + 1) for j in (1, 2, 3)]
    x = [T.slice_axis(v, 1, j, j + 1) for j in (0, 1, 2)]

    def cross(a, b):
        return [T.sub(T.mul(a[1], b[2]), T.mul(a[2], b[1])),
                T.sub(T.mul(a[2], b[0]), T.mul(a[0], b[2])),
                T.sub(T.mul(a[0], b[1]), T.mul(a[1], b[0]))]

    t = [T.mul(c, 2.0) for c in cross(u, x)]
    uxt = cross(u, t)
    return T.concat([T.add(x[j], T.add(T.mul(w, t[j]), uxt[j]))
                     for j in range(3)], axis=1)


# ----------------------------------------------------------------- network


class VelocityNet:
    """Cross-fragment transformer from (token, t, pose) to se(3) velocity.

    Fragments of one object attend to each other so each prediction sees
    the whole constellation; no positional encoding over the fragment
    axis keeps the map permutation-equivariant. The heads parametrize
    the endpoint pose rather than the velocity itself, so the regression
    target is bounded and constant in t; zero-init heads mean every
    fragment is initially pulled toward the identity pose.
    """

    def __init__(self, token_dim: int = 128, width: int = 128, blocks: int = 2,
                 pe_bands: int = 6, vec_channels: int = 64,
                 corr_channels: int = 0, pair_dirs: int = 32, ns_iters: int = 8,
                 seed: int = 0, dtype=np.float32):
        self.token_dim = token_dim
        self.width = width
        self.blocks = blocks
        self.pe_bands = pe_bands
        # leading vec_channels*3 token dims hold rotation-equivariant
        # vector channels; the bilinear head reads them directly
        self.vec_channels = min(vec_channels, token_dim // 3)
        if corr_channels > self.vec_channels:
            raise ValueError(f"corr_channels={corr_channels} exceeds "
                             f"vec_channels={self.vec_channels}")
        self.corr_channels = corr_channels
        self.pair_dirs = max(pair_dirs, corr_channels)
        self.ns_iters = ns_iters
        self.dtype = np.dtype(dtype)
        self.in_dim = token_dim + 2 * pe_bands + 12
        rng = np.random.default_rng((seed, 0xF10))
        self.params: dict[str, T.Array] = {}

        def par(name, shape, fan):
            self.params[name] = T.parameter(
                rng.normal(scale=1.0 / np.sqrt(fan), size=shape), dtype=dtype)

        def zeros(name, shape):
            self.params[name] = T.parameter(np.zeros(shape), dtype=dtype)

        def ones(name, shape):
            self.params[name] = T.parameter(np.ones(shape), dtype=dtype)

        par("in/w", (self.in_dim, width), self.in_dim)
        zeros("in/b", (width,))
        for bi in range(blocks):
            p = f"block{bi}"
            for w in ("wq", "wk", "wv", "wo"):
                par(f"{p}/att/{w}", (width, width), width)
            ones(f"{p}/ln1/g", (width,))
            zeros(f"{p}/ln1/b", (width,))
            par(f"{p}/mlp/w1", (width, 2 * width), width)
            zeros(f"{p}/mlp/b1", (2 * width,))
            par(f"{p}/mlp/w2", (2 * width, width), 2 * width)
            zeros(f"{p}/mlp/b2", (width,))
            ones(f"{p}/ln2/g", (width,))
            zeros(f"{p}/ln2/b", (width,))
        # Endpoint heads: residual quaternion around identity plus a final
        # translation.  Zero init therefore means "predict the identity
        # pose", and the velocity is derived from the endpoint in-graph.
        zeros("head_rot/w", (width, 4))
        zeros("head_rot/b", (4,))
        zeros("head_tr/w", (width, 3))
        zeros("head_tr/b", (3,))
        # Correspondence head: channel mixes project each fragment's
        # vector channels to matching directions; the gated sum of outer
        # products with the other fragments' directions, minus a rank-one
        # centering term, is a weighted correspondence moment whose polar
        # factor is the relative rotation. The trailing corr_channels are
        # initialized as selectors of the color-keyed point block, and
        # all gates start at zero so the head engages only as it learns.
        k = self.pair_dirs
        for name in ("bil/wa", "bil/wb"):
            w = rng.normal(scale=0.05 / np.sqrt(self.vec_channels),
                           size=(k, self.vec_channels))
            off = self.vec_channels - corr_channels
            for r in range(corr_channels):
                w[r, off + r] += 1.0
            self.params[name] = T.parameter(w, dtype=dtype)
        for g in ("g_diag", "g_cen_o", "g_cen_s", "g_tr_o", "g_tr_s"):
            zeros(f"bil/{g}", (width, k))
            zeros(f"bil/{g}_b", (k,))

    def _attention(self, x: T.Array, pre: str,
                   mask: np.ndarray | None) -> T.Array:
        p = self.params
        q = T.matmul(x, p[f"{pre}/att/wq"])
        k = T.matmul(x, p[f"{pre}/att/wk"])
        v = T.matmul(x, p[f"{pre}/att/wv"])
        logits = T.mul(T.matmul(q, T.transpose(k, (1, 0))),
                       1.0 / np.sqrt(self.width))
        if mask is not None:
            logits = T.add(logits, T.constant(mask.astype(self.dtype)))
        return T.matmul(T.matmul(T.softmax(logits, axis=-1), v),
                        p[f"{pre}/att/wo"])

    def predict_batch(self, items: list, mask: np.ndarray | None = None
                      ) -> list[list[TangentVector]]:
        """Forward several objects through one graph.

        items are (poses, t, tokens) triples. Attention is restricted to
        rows of the same object by an additive block-diagonal mask, so
        the result matches per-object forwards exactly while the matmuls
        run once at batch width.

        The heads predict the endpoint pose (unit quaternion and final
        translation); the returned tangent vectors are the conditional
        field toward that endpoint, (log of the remaining motion)/(1-t),
        computed inside the graph so gradients reach the heads.
        """
        if not items:
            raise ValueError("predict_batch needs at least one object")
        p = self.params
        vc3 = self.vec_channels * 3
        rows = []
        sizes = []
        q_now = []
        b_now = []
        inv_rem = []
        v_own = []
        v_oth = []
        for poses, t, tokens in items:
            if len(poses) == 0:
                raise ValueError("predict_velocity needs at least one fragment")
            if len(poses) != len(tokens):
                raise ValueError(f"{len(poses)} poses for {len(tokens)} tokens")
            if not 0.0 <= t < 1.0:
                raise ValueError(f"t={t} outside [0, 1)")
            sizes.append(len(poses))
            pe_t = positional_encoding([float(t)], self.pe_bands)
            vecs = [np.asarray(tok.data if isinstance(tok, T.Array) else tok,
                               dtype=np.float64)[:vc3]
                    .reshape(self.vec_channels, 3) for tok in tokens]
            v_total = np.sum(vecs, axis=0)
            for g, tok, vec in zip(poses, tokens, vecs):
                tok = tok if isinstance(tok, T.Array) else T.constant(
                    np.asarray(tok, dtype=self.dtype))
                pose_feat = np.concatenate([np.asarray(g.rotation).reshape(-1),
                                            np.asarray(g.translation)])
                extra = T.constant(np.concatenate([pe_t, pose_feat])
                                   .astype(self.dtype))
                rows.append(T.reshape(T.concat([tok, extra], axis=0),
                                      (1, self.in_dim)))
                q_now.append(rotation_to_quaternion(g.rotation))
                b_now.append(np.asarray(g.translation, dtype=np.float64))
                inv_rem.append(1.0 / (1.0 - float(t)))
                v_own.append(vec)
                v_oth.append(v_total - vec)
        total = sum(sizes)
        if mask is None and len(items) > 1:
            mask = np.full((total, total), -1e9)
            at = 0
            for m in sizes:
                mask[at:at + m, at:at + m] = 0.0
                at += m
        x = T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        x = T.relu(T.add(T.matmul(x, p["in/w"]), p["in/b"]))
        for bi in range(self.blocks):
            pre = f"block{bi}"
            h = T.layer_norm(x, p[f"{pre}/ln1/g"], p[f"{pre}/ln1/b"])
            x = T.add(x, self._attention(h, pre, mask))
            h = T.layer_norm(x, p[f"{pre}/ln2/g"], p[f"{pre}/ln2/b"])
            h = T.relu(T.add(T.matmul(h, p[f"{pre}/mlp/w1"]), p[f"{pre}/mlp/b1"]))
            h = T.add(T.matmul(h, p[f"{pre}/mlp/w2"]), p[f"{pre}/mlp/b2"])
            x = T.add(x, h)
        dt = self.dtype
        kd = self.pair_dirs

        def mix_axes(weights, vecs):
            # (k, C) channel mix of stacked (M, C, 3) constants, returned
            # as per-axis (M, k) columns so everything downstream is
            # componentwise across the batch
            vc = vecs.shape[1]
            flat = T.constant(np.transpose(vecs, (1, 0, 2))
                              .reshape(vc, total * 3).astype(dt))
            mixed = T.transpose(T.reshape(T.matmul(weights, flat),
                                          (kd, total, 3)), (1, 0, 2))
            return [T.reshape(T.slice_axis(mixed, 2, j, j + 1), (total, kd))
                    for j in range(3)]

        do = mix_axes(p["bil/wa"], np.stack(v_oth))
        ds = mix_axes(p["bil/wb"], np.stack(v_own))
        gate = {g: T.add(T.matmul(x, p[f"bil/{g}"]), p[f"bil/{g}_b"])
                for g in ("g_diag", "g_cen_o", "g_cen_s", "g_tr_o", "g_tr_s")}
        cen_o = [T.sum_(T.mul(gate["g_cen_o"], do[j]), axis=1, keepdims=True)
                 for j in range(3)]
        cen_s = [T.sum_(T.mul(gate["g_cen_s"], ds[j]), axis=1, keepdims=True)
                 for j in range(3)]
        m = [[T.sub(T.sum_(T.mul(T.mul(gate["g_diag"], do[j]), ds[k]),
                           axis=1, keepdims=True),
                    T.mul(cen_o[j], cen_s[k]))
              for k in range(3)] for j in range(3)]
        r = _polar3_cols(m, self.ns_iters)
        # quaternion of the projected rotation: [1 + trace, antisymmetric
        # part]; the head's free output adds corrections before the
        # normalization inside endpoint_field
        q_struct = T.concat([
            T.add(1.0, T.add(r[0][0], T.add(r[1][1], r[2][2]))),
            T.sub(r[2][1], r[1][2]),
            T.sub(r[0][2], r[2][0]),
            T.sub(r[1][0], r[0][1]),
        ], axis=1)
        q_raw = T.add(T.add(T.matmul(x, p["head_rot/w"]), p["head_rot/b"]),
                      q_struct)
        eps = 1e-6 if self.dtype == np.float32 else 1e-12
        q_hat = T.div(q_raw, T.sqrt(T.add(
            T.sum_(T.square(q_raw), axis=1, keepdims=True), eps)))
        # endpoint translation from matched centroids: other fragments'
        # gated centroid minus one's own, carried through the predicted
        # endpoint rotation
        t_oth = T.concat([T.sum_(T.mul(gate["g_tr_o"], do[j]),
                                 axis=1, keepdims=True) for j in range(3)],
                         axis=1)
        t_own = T.concat([T.sum_(T.mul(gate["g_tr_s"], ds[j]),
                                 axis=1, keepdims=True) for j in range(3)],
                         axis=1)
        b_struct = T.sub(t_oth, _quat_rotate_rows(t_own, q_hat))
        b1 = T.add(T.add(T.matmul(x, p["head_tr/w"]), p["head_tr/b"]),
                   b_struct)
        v_rot, v_tr = endpoint_field(q_hat, b1, np.stack(q_now),
                                     np.stack(b_now),
                                     np.asarray(inv_rem))
        out = []
        at = 0
        for m in sizes:
            group = []
            for i in range(at, at + m):
                group.append(TangentVector(
                    rotational=T.reshape(T.slice_axis(v_rot, 0, i, i + 1), (3,)),
                    translational=T.reshape(T.slice_axis(v_tr, 0, i, i + 1), (3,)),
                ))
            out.append(group)
            at += m
        return out

    def predict_velocity(self, poses: list[RigidTransform], t: float,
                         tokens: list) -> list[TangentVector]:
        """One tangent vector per fragment; joint attention across them."""
        return self.predict_batch([(poses, t, tokens)])[0]

    def state_entries(self, prefix: str = "flow") -> dict[str, np.ndarray]:
        return {f"{prefix}/{k}": v.data for k, v in self.params.items()}

    def load_state_entries(self, entries: dict[str, np.ndarray],
                           prefix: str = "flow") -> None:
        for k, v in self.params.items():
            key = f"{prefix}/{k}"
            if key not in entries:
                raise KeyError(f"checkpoint missing {key}")
            data = np.asarray(entries[key], dtype=self.dtype)
            if data.shape != v.data.shape:
                raise ValueError(f"{key}: shape {data.shape} != {v.data.shape}")
            v.data = data


# --------------------------------------------------------------- inference


def integrate(net, obj: UnassembledObject | None, tokens: list, steps: int,
              mode: str = "sample_p0",
              rng: np.random.Generator | None = None) -> list[RigidTransform]:
    """Explicit Euler on SE(3) from t=0 to t=1 with dt = 1/steps.

    Rotations update on the right (R <- R exp(dt v_R)); any orthonormality
    drift beyond 1e-5 is repaired by polar projection. The anchor fragment
    (from `obj`, or index 0 when obj is None) starts at identity in both
    modes, and the returned poses are re-expressed in the anchor's final
    frame so the anchor comes back exactly identity.

    `net` is anything with predict_velocity(poses, t, tokens); predictions
    may be engine arrays or plain vectors.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if mode not in ("sample_p0", "identity_start"):
        raise ValueError(f"mode must be sample_p0 or identity_start, got {mode!r}")
    m = len(tokens)
    if m == 0:
        raise ValueError("integrate needs at least one fragment")
    anchor = 0 if obj is None else anchor_index(obj)
    if obj is not None and len(obj.fragments) != m:
        raise ValueError(f"{m} tokens for {len(obj.fragments)} fragments")
    if mode == "sample_p0":
        if rng is None:
            rng = np.random.default_rng(0)
        poses = [sample_initial_pose(rng) for _ in range(m)]
    else:
        poses = [RigidTransform.identity() for _ in range(m)]
    poses[anchor] = RigidTransform.identity()

    dt = 1.0 / steps
    for k in range(steps):
        t = k * dt
        vels = net.predict_velocity(poses, t, tokens)
        new_poses = []
        for g, v in zip(poses, vels):
            vr = np.asarray(v.rotational.data if isinstance(v.rotational, T.Array)
                            else v.rotational, dtype=np.float64)
            vb = np.asarray(v.translational.data if isinstance(v.translational, T.Array)
                            else v.translational, dtype=np.float64)
            if not (np.all(np.isfinite(vr)) and np.all(np.isfinite(vb))):
                raise TrainingDiverged(f"non-finite velocity at step {k} (t={t:.4f})")
            rot = g.rotation @ so3_exp(dt * vr)
            drift = np.abs(rot @ rot.T - np.eye(3)).max()
            if drift > DRIFT_TOL:
                rot = project_rotation(rot)
            new_poses.append(RigidTransform(rot, g.translation + dt * vb))
        poses = new_poses

    gauge = poses[anchor].inverse()
    return [gauge.compose(g) for g in poses]


# ---------------------------------------------------------------- training


def _clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    The velocity-matching loss carries a 1/(1-t)^2 weight, so draws near
    the t cap produce rare huge gradients; clipping bounds those tails
    without changing the objective.
    """
    sq = 0.0
    for v in params.values():
        if v.grad is not None:
            sq += float((v.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        for v in params.values():
            if v.grad is not None:
                v.grad *= scale
    return norm


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    lr_warmup: int = 100
    lr_final_frac: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    batch_objects: int = 8
    lam: float = 1.0
    alpha: float = 0.3
    t_cap: float = 0.999
    grad_clip: float = 1.0
    net_width: int = 128
    net_blocks: int = 2
    points_per_fragment: int = 192
    token_augment: int = 3
    overlap_objects: int = 1
    overlap_points: int = 48
    overlap_resolution: int = 20
    overlap_sigma_cells: float = 1.5
    overlap_eps: float = 1e-6
    seed: int = 0
    log_path: str | None = None
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0.0 < self.t_cap < 1.0:
            raise ConfigError(f"t_cap must be in (0, 1), got {self.t_cap}")
        if self.lam <= 0.0:
            raise ConfigError(f"lam must be positive, got {self.lam}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_objects < 1:
            raise ConfigError("batch_objects must be >= 1")
        if self.overlap_objects < 0:
            raise ConfigError("overlap_objects must be >= 0")
        if self.grad_clip < 0.0:
            raise ConfigError("grad_clip must be >= 0 (0 disables)")
        if self.net_width < 1 or self.net_blocks < 1:
            raise ConfigError("net_width and net_blocks must be >= 1")

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to lr * lr_final_frac."""
        if self.lr_warmup > 0 and step < self.lr_warmup:
            return self.lr * (step + 1) / self.lr_warmup
        span = max(self.steps - self.lr_warmup, 1)
        frac = min(max(step - self.lr_warmup, 0) / span, 1.0)
        lo = self.lr * self.lr_final_frac
        return lo + 0.5 * (self.lr - lo) * (1.0 + np.cos(np.pi * frac))


@dataclass
class _ObjectCache:
    """Frozen-encoder view of one training object.

    views[v][i] is fragment i's conditioning token under the v-th
    orientation augmentation, poses_views[v][i] the matching anchor-
    relative ground-truth pose, and overlap_views[v][i] the collision
    sample points in the same gauge. View 0 is the unrotated original.
    """

    anchor: int
    views: list[list[np.ndarray]]
    poses_views: list[list[RigidTransform]]
    overlap_views: list[list[np.ndarray]] = field(default_factory=list)


def _relative_gt(obj: UnassembledObject, anchor: int) -> list[RigidTransform]:
    inv = obj.gt_poses[anchor].inverse()
    return [inv.compose(g) for g in obj.gt_poses]


def build_object_cache(obj: UnassembledObject, encoder: FragmentEncoder,
                       cfg: TrainConfig, rng: np.random.Generator) -> _ObjectCache:
    """Precompute tokens with a frozen encoder.

    Orientation augmentations reuse the cached attention-stack output:
    because the geometry branch is certified equivariant, rotating a
    fragment only rotates its vector channels, so extra views cost one
    cheap enrichment pass instead of a full encoder forward.
    """
    if obj.gt_poses is None:
        raise ConfigError("training requires ground-truth poses")
    anchor = anchor_index(obj)
    rel = _relative_gt(obj, anchor)
    cg = encoder.config.geo_channels

    subs = [sample_points(f, min(cfg.points_per_fragment, len(f)))
            for f in obj.fragments]
    cached = [encoder.encode_fragment(s).data for s in subs]
    rgb_mean = [h[:, cg:, :].mean(axis=0).reshape(-1) for h in cached]
    keyed = []
    for f in obj.fragments:
        sub_a = sample_points(f, min(encoder.config.anchor_points, len(f)))
        probs = encoder.segment_boundary(encoder.encode_fragment(sub_a)).data
        keyed.append(encoder.color_keyed_points(sub_a, probs))

    def tokens_for(frames):
        toks = []
        for i, (h, s, rot) in enumerate(zip(cached, subs, frames)):
            if rot is None:
                h_v, s_v = h, s
                kpts = keyed[i][0]
            else:
                h_v = np.concatenate([h[:, :cg, :] @ rot, h[:, cg:, :]],
                                     axis=1).astype(h.dtype, copy=False)
                s_v = Fragment(s.positions @ rot, s.normals @ rot, s.colors,
                               scale=s.scale)
                kpts = keyed[i][0] @ rot
            enr = encoder.positional_enrich(T.constant(h_v), s_v).data
            inv = enr.mean(axis=0)
            if i == anchor:
                inv = inv + encoder.params["anchor/flag"].data
            pooled = np.concatenate([h_v[:, :cg, :].mean(axis=0).reshape(-1),
                                     kpts.reshape(-1), rgb_mean[i],
                                     keyed[i][1], inv])
            toks.append(pooled.astype(h.dtype, copy=False))
        return toks

    base_pts = []
    for f in obj.fragments:
        k = min(cfg.overlap_points, len(f))
        base_pts.append(f.positions[fps_indices(f.positions, k)])

    views = [tokens_for([None] * len(subs))]
    poses_views = [rel]
    overlap_views = [base_pts]
    for _ in range(cfg.token_augment):
        rots = [_haar(rng) for _ in subs]
        views.append(tokens_for(rots))
        # re-gauge so the rotated anchor sits at identity again; the
        # anchor's view rotation then shows up in every other target,
        # which is what makes the anchor token's orientation matter
        ra_inv = rots[anchor].T
        poses_views.append([
            RigidTransform(ra_inv @ g.rotation @ r, ra_inv @ g.translation)
            for g, r in zip(rel, rots)])
        overlap_views.append([p @ r for p, r in zip(base_pts, rots)])
    return _ObjectCache(anchor, views, poses_views, overlap_views)


def _haar(rng):
    from .liegroup import random_rotation

    return random_rotation(rng)


def _posed_points_graph(points: np.ndarray, rot: T.Array, trans: T.Array,
                        dtype) -> T.Array:
    p = T.constant(points.astype(dtype))
    return T.add(T.matmul(p, T.transpose(rot, (1, 0))), T.reshape(trans, (1, 3)))


def train_step(net: VelocityNet, caches: list[_ObjectCache], cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[T.Array, float, float]:
    """Loss graph for one batch of objects; returns (graph, flow, overlap)."""
    picks = [int(rng.integers(len(caches)))
             for _ in range(min(cfg.batch_objects, max(len(caches), 1)))]
    items = []
    all_samples = []
    drawn_views = []
    for ci in picks:
        cache = caches[ci]
        view = int(rng.integers(len(cache.views)))
        t = float(rng.uniform(0.0, cfg.t_cap))
        rel = cache.poses_views[view]
        samples = []
        for i, g1 in enumerate(rel):
            if i == cache.anchor:
                samples.append(anchor_flow_sample(t))
            else:
                samples.append(make_flow_sample(g1, t, rng))
        items.append(([s.gt for s in samples], t, cache.views[view]))
        all_samples.append(samples)
        drawn_views.append(view)

    groups = net.predict_batch(items)
    flat_preds = [p for g in groups for p in g]
    flat_samples = [s for ss in all_samples for s in ss]
    l_flow = flow_loss(flat_preds, flat_samples, lam=cfg.lam)

    n_ov = min(cfg.overlap_objects, len(picks))
    if cfg.alpha > 0.0 and n_ov > 0:
        from .overlap import no_overlap_loss

        # stochastic estimate: penalize the first n_ov batch entries whose
        # object has more than one fragment (picks are already uniform)
        ov_terms = []
        for bi in range(len(picks)):
            if len(ov_terms) == n_ov:
                break
            cache = caches[picks[bi]]
            if not cache.overlap_views or len(cache.overlap_views[0]) < 2:
                continue
            samples = all_samples[bi]
            preds = groups[bi]
            remaining = 1.0 - items[bi][1]
            posed = []
            for s, p, pts in zip(samples, preds,
                                 cache.overlap_views[drawn_views[bi]]):
                w = T.mul(_as_graph(p.rotational, net.dtype), remaining)
                rot_step = rodrigues_graph(w)
                rot = T.matmul(T.constant(s.gt.rotation.astype(net.dtype)),
                               rot_step)
                trans = T.add(T.constant(s.gt.translation.astype(net.dtype)),
                              T.mul(_as_graph(p.translational, net.dtype),
                                    remaining))
                posed.append(_posed_points_graph(pts, rot, trans, net.dtype))
            ov_terms.append(T.reshape(
                no_overlap_loss(posed, resolution=cfg.overlap_resolution,
                                sigma_cells=cfg.overlap_sigma_cells,
                                eps=cfg.overlap_eps), (1,)))
        if ov_terms:
            l_overlap = T.mean(T.concat(ov_terms, axis=0))
            total = T.add(l_flow, T.mul(l_overlap, cfg.alpha))
            return total, float(l_flow.data), float(l_overlap.data)
    return l_flow, float(l_flow.data), 0.0


def train(objects: list[UnassembledObject], encoder: FragmentEncoder,
          cfg: TrainConfig, net: VelocityNet | None = None,
          optimizer: T.Adam | None = None, start_step: int = 0):
    """Optimize the velocity field on frozen-encoder tokens.

    Returns (net, rows) where rows are the logged
    (step, L_flow, L_overlap, L_total, wall_ms) tuples. Deterministic
    given cfg.seed: step s draws from default_rng((seed, s)), so a
    resumed run continues the exact trace.
    """
    if not objects:
        raise ConfigError("training requires at least one object")
    if net is None:
        net = VelocityNet(token_dim=encoder.config.token_width,
                          width=cfg.net_width, blocks=cfg.net_blocks,
                          vec_channels=encoder.config.vec_token_channels,
                          corr_channels=encoder.config.n_anchors,
                          seed=cfg.seed)
    if optimizer is None:
        optimizer = T.Adam(net.params, lr=cfg.lr, betas=cfg.betas)

    cache_rng = np.random.default_rng((cfg.seed, 0xCAC4E))
    caches = [build_object_cache(o, encoder, cfg, cache_rng) for o in objects]

    log_file = None
    writer = None
    if cfg.log_path is not None:
        path = Path(cfg.log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or start_step == 0
        log_file = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["step", "L_flow", "L_overlap", "L_total", "wall_ms"])

    rows = []
    try:
        for s in range(start_step, start_step + cfg.steps):
            t0 = time.perf_counter()
            rng = np.random.default_rng((cfg.seed, s))
            total, lf, lo = train_step(net, caches, cfg, rng)
            lt = float(total.data)
            if not np.isfinite(lt):
                raise TrainingDiverged(
                    f"step {s}: loss non-finite (L_flow={lf}, L_overlap={lo})")
            optimizer.zero_grad()
            T.backward(total)
            if cfg.grad_clip > 0.0:
                _clip_grad_norm(net.params, cfg.grad_clip)
            optimizer.lr = cfg.lr_at(s)
            optimizer.step()
            wall_ms = (time.perf_counter() - t0) * 1e3
            row = (s, lf, lo, lt, wall_ms)
            rows.append(row)
            if writer is not None and s % cfg.log_every == 0:
                writer.writerow([s, f"{lf:.6g}", f"{lo:.6g}", f"{lt:.6g}",
                                 f"{wall_ms:.1f}"])
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return net, rows


def assemble_tokens(obj: UnassembledObject, encoder: FragmentEncoder,
                    points_per_fragment: int = 192) -> tuple[list[np.ndarray], int]:
    """Inference-time conditioning tokens and the anchor index."""
    anchor = anchor_index(obj)
    toks = [encoder.fragment_token(f, is_anchor=(i == anchor),
                                   n_points=points_per_fragment).data
            for i, f in enumerate(obj.fragments)]
    return toks, anchor
