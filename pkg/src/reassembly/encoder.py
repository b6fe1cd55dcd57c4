"""Multimodal fragment encoder.

Geometry runs through vector channels (each feature is a 3-vector, so a
rotation of the input acts on every channel by plain matrix
multiplication) and is rotation-equivariant by construction. Color runs
through a scalar token transformer and never sees coordinates, so it is
rotation-invariant by construction. Their concatenation, enriched with
sinusoidal coordinate/normal/scale encodings, yields per-point features
for the fracture-segmentation head and a pooled per-fragment token for
the pose flow.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, TrainingDiverged
from .fragments.core import Fragment

NONLIN_EPS = 1e-6
NORM_EPS = 1e-6


@dataclass
class EncoderConfig:
    geo_channels: int = 64
    rgb_channels: int = 32
    geo_blocks: int = 4
    rgb_blocks: int = 2
    pe_bands: int = 6
    token_dim: int = 128
    shape_hidden: int = 256
    seg_proj: int = 16
    seg_hidden: int = 64
    # "vn" is the equivariant vector-channel branch; "mlp" swaps in a
    # plain per-point MLP of matched parameter count (ablation arm).
    geo_backbone: str = "vn"
    # Color-keyed pooling: positions averaged under fixed RGB kernels,
    # gated by predicted boundary probability. Matching colors across a
    # fracture mark the same physical spot, so these pooled points give
    # the pose flow cross-fragment correspondences that survive pooling.
    anchor_grid: int = 3
    anchor_rgb_lo: float = 0.3
    anchor_rgb_hi: float = 0.7
    anchor_tau: float = 0.07
    anchor_gamma: float = 2.0
    anchor_points: int = 512

    def __post_init__(self):
        if self.geo_backbone not in ("vn", "mlp"):
            raise ConfigError(f"geo_backbone must be 'vn' or 'mlp', "
                              f"got {self.geo_backbone!r}")
        for name in ("geo_channels", "rgb_channels", "geo_blocks", "rgb_blocks",
                     "pe_bands", "token_dim", "shape_hidden", "seg_proj",
                     "seg_hidden", "anchor_grid", "anchor_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.anchor_tau <= 0.0:
            raise ConfigError("anchor_tau must be positive")
        if self.anchor_gamma < 0.0:
            raise ConfigError("anchor_gamma must be >= 0")
        if not self.anchor_rgb_lo <= self.anchor_rgb_hi:
            raise ConfigError("anchor_rgb_lo must not exceed anchor_rgb_hi")

    @property
    def n_anchors(self) -> int:
        return self.anchor_grid ** 3

    @property
    def vec_token_channels(self) -> int:
        """Rotation-equivariant 3-vector channels at the front of the
        pooled token: mean geometry features plus the color-keyed points."""
        return self.geo_channels + self.n_anchors

    @property
    def token_width(self) -> int:
        """Width of the pooled fragment token.

        Layout: [geo mean | color-keyed points | rgb mean | anchor
        masses | enriched mean]; the first vec_token_channels*3 entries
        rotate with the fragment, the rest are invariant or view-frame
        features.
        """
        return (self.vec_token_channels * 3 + self.rgb_channels * 3
                + self.n_anchors + self.token_dim)

    def anchor_colors(self) -> np.ndarray:
        """The fixed RGB kernel centers, an (n_anchors, 3) grid."""
        g = np.linspace(self.anchor_rgb_lo, self.anchor_rgb_hi, self.anchor_grid)
        return np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)


def positional_encoding(x: np.ndarray, bands: int) -> np.ndarray:
    """Sinusoidal features [sin(2^l x), cos(2^l x)] for l = 0..bands-1.

    Input (..., K) maps to (..., 2*bands*K); per coordinate the layout is
    sin/cos alternating with ascending frequency.
    """
    x = np.asarray(x, dtype=np.float64)
    freqs = 2.0 ** np.arange(bands)
    ang = x[..., None] * freqs  # (..., K, L)
    parts = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., K, L, 2)
    return parts.reshape(*x.shape[:-1], x.shape[-1] * 2 * bands)


# ------------------------------------------------------------- vector layers


def vn_linear(x: T.Array, weights: T.Array) -> T.Array:
    """Mix vector channels: (N, Cin, 3) x (Cout, Cin) -> (N, Cout, 3).

    Pure channel mixing commutes with any rotation on the trailing axis.
    Runs as one flat matmul rather than N small ones.
    """
    if x.shape[1] != weights.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, "
                         f"weights expect {weights.shape[1]}")
    n = x.shape[0]
    flat = T.reshape(T.transpose(x, (1, 0, 2)), (x.shape[1], n * 3))
    out = T.matmul(weights, flat)
    return T.transpose(T.reshape(out, (weights.shape[0], n, 3)), (1, 0, 2))


def vn_nonlinearity(x: T.Array, dir_weights: T.Array) -> T.Array:
    """Direction-split rectification.

    Each channel learns a direction d (a vn_linear output). Components
    of x along d with negative inner product are removed; the rest pass
    through. Since <x,d> and |d| are rotation-invariant, the map stays
    equivariant.
    """
    d = vn_linear(x, dir_weights)
    dot = T.sum_(T.mul(x, d), axis=2, keepdims=True)
    dsq = T.add(T.sum_(T.square(d), axis=2, keepdims=True), NONLIN_EPS)
    coef = T.div(T.minimum(dot, 0.0), dsq)
    return T.sub(x, T.mul(coef, d))


def vn_mean_norm(x: T.Array) -> T.Array:
    """Scale all channels of a point by their mean vector length.

    Pure positive scaling per point: equivariant, keeps activations O(1)
    through deep stacks without centering (which would flip vectors).
    """
    norms = T.sqrt(T.add(T.sum_(T.square(x), axis=2, keepdims=True), NORM_EPS))
    return T.div(x, T.add(T.mean(norms, axis=1, keepdims=True), NORM_EPS))


def vn_attention(x: T.Array, wq: T.Array, wk: T.Array, wv: T.Array) -> T.Array:
    """Self-attention with rotation-invariant logits over vector tokens.

    Logits are full inner products of query/key channel stacks (invariant
    under a shared rotation); values mix equivariantly, so the output
    rotates with the input. No output projection: a single token returns
    exactly its value projection.
    """
    n, c = x.shape[0], wq.shape[0]
    q = T.reshape(vn_attention_queries(x, wq), (n, c * 3))
    k = T.reshape(vn_linear(x, wk), (n, c * 3))
    v = T.reshape(vn_linear(x, wv), (n, wv.shape[0] * 3))
    logits = T.mul(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / np.sqrt(3.0 * c))
    attn = T.softmax(logits, axis=-1)
    return T.reshape(T.matmul(attn, v), (n, wv.shape[0], 3))


def vn_attention_queries(x: T.Array, wq: T.Array) -> T.Array:
    return vn_linear(x, wq)


# ------------------------------------------------------------------ encoder


class FragmentEncoder:
    """Holds parameters and forward passes for both branches and heads.

    Parameters live in a flat name -> Array dict so checkpoints and the
    optimizer see one namespace.
    """

    def __init__(self, config: EncoderConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config or EncoderConfig()
        self.dtype = np.dtype(dtype)
        self.fault_layer: str | None = None  # set by certification fault injection
        rng = np.random.default_rng((seed, 0xE27C))
        self.params: dict[str, T.Array] = {}
        self._init_params(rng)

    # -- parameter setup

    def _param(self, name: str, shape, fan_in: int) -> None:
        rng = self._rng
        w = rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape)
        self.params[name] = T.parameter(w, dtype=self.dtype)

    def _zeros(self, name: str, shape) -> None:
        self.params[name] = T.parameter(np.zeros(shape), dtype=self.dtype)

    def _ones(self, name: str, shape) -> None:
        self.params[name] = T.parameter(np.ones(shape), dtype=self.dtype)

    def _init_params(self, rng) -> None:
        self._rng = rng
        c = self.config
        cg, cr = c.geo_channels, c.rgb_channels
        if c.geo_backbone == "vn":
            self._param("geo/lift", (cg, 2), 2)
            for b in range(c.geo_blocks):
                p = f"geo/block{b}"
                self._param(f"{p}/att/wq", (cg, cg), cg)
                self._param(f"{p}/att/wk", (cg, cg), cg)
                self._param(f"{p}/att/wv", (cg, cg), cg)
                self._param(f"{p}/mlp/w1", (cg, cg), cg)
                self._param(f"{p}/mlp/dir", (cg, cg), cg)
                self._param(f"{p}/mlp/w2", (cg, cg), cg)
            self._param("geo/out", (cg, cg), cg)
        else:
            # parameter-matched plain MLP on flat (x, n) per point: the
            # deliberately non-equivariant ablation backbone
            width = self._mlp_width()
            self._param("geo/mlp/w1", (6, width), 6)
            self._zeros("geo/mlp/b1", (width,))
            self._param("geo/mlp/w2", (width, width), width)
            self._zeros("geo/mlp/b2", (width,))
            self._param("geo/mlp/w3", (width, 3 * cg), width)
            self._zeros("geo/mlp/b3", (3 * cg,))

        self._param("rgb/embed/w", (3, cr), 3)
        self._zeros("rgb/embed/b", (cr,))
        for b in range(c.rgb_blocks):
            p = f"rgb/block{b}"
            for w in ("wq", "wk", "wv", "wo"):
                self._param(f"{p}/att/{w}", (cr, cr), cr)
            self._ones(f"{p}/ln1/g", (cr,))
            self._zeros(f"{p}/ln1/b", (cr,))
            self._param(f"{p}/mlp/w1", (cr, 2 * cr), cr)
            self._zeros(f"{p}/mlp/b1", (2 * cr,))
            self._param(f"{p}/mlp/w2", (2 * cr, cr), 2 * cr)
            self._zeros(f"{p}/mlp/b2", (cr,))
            self._ones(f"{p}/ln2/g", (cr,))
            self._zeros(f"{p}/ln2/b", (cr,))
        self._param("rgb/expand", (cr, 3), 1)

        flat = (cg + cr) * 3
        enriched = flat + 2 * c.pe_bands * 3 + 2 * c.pe_bands * 3 + 2 * c.pe_bands
        self._param("shape/w1", (enriched, c.shape_hidden), enriched)
        self._zeros("shape/b1", (c.shape_hidden,))
        self._param("shape/w2", (c.shape_hidden, c.token_dim), c.shape_hidden)
        self._zeros("shape/b2", (c.token_dim,))
        # marks the anchor fragment in its token; lives in the invariant
        # slice only, so the vector block keeps its exact equivariance
        self._param("anchor/flag", (c.token_dim,), c.token_dim)

        gram = c.seg_proj * c.seg_proj
        self._param("seg/proj", (c.seg_proj, cg), cg)
        self._param("seg/w1", (gram + cr * 3, c.seg_hidden), gram + cr * 3)
        self._zeros("seg/b1", (c.seg_hidden,))
        self._param("seg/w2", (c.seg_hidden, 1), c.seg_hidden)
        self._zeros("seg/b2", (1,))
        del self._rng

    def _mlp_width(self) -> int:
        # count of the vn branch's weights, matched by a 2-hidden-layer MLP:
        # 6w + w^2 + 3*cg*w + biases ~ vn_total
        c = self.config
        cg = c.geo_channels
        vn_total = cg * 2 + c.geo_blocks * 6 * cg * cg + cg * cg
        # solve w^2 + (6 + 3 cg + 4 + 3 cg/... ) w - vn_total = 0 approximately
        a, b = 1.0, 6 + 3 * cg + 2
        w = int((-b + np.sqrt(b * b + 4 * a * vn_total)) / (2 * a))
        return max(8, w)

    # -- dtype handling

    def cast(self, dtype) -> "FragmentEncoder":
        """Copy of this encoder with parameters converted to dtype."""
        clone = FragmentEncoder.__new__(FragmentEncoder)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.fault_layer = self.fault_layer
        clone.params = {k: T.parameter(v.data, dtype=dtype)
                        for k, v in self.params.items()}
        return clone

    def _const(self, x) -> T.Array:
        return T.constant(np.asarray(x, dtype=self.dtype))

    def _fault(self, name: str, out: T.Array) -> T.Array:
        if self.fault_layer == name:
            # scalar bias on one vector component: breaks equivariance
            return T.add(out, self._const(np.array([0.1, 0.0, 0.0])))
        return out

    # -- geometry branch

    def geo_layers(self) -> list[tuple[str, int]]:
        """Layer names with input channel counts, in forward order."""
        if self.config.geo_backbone != "vn":
            return []
        cg = self.config.geo_channels
        layers = [("geo/lift", 2)]
        for b in range(self.config.geo_blocks):
            layers += [(f"geo/block{b}/norm1", cg),
                       (f"geo/block{b}/attention", cg),
                       (f"geo/block{b}/norm2", cg),
                       (f"geo/block{b}/mlp", cg)]
        layers.append(("geo/out", cg))
        return layers

    def geo_layer_apply(self, name: str, x: T.Array) -> T.Array:
        p = self.params
        if name == "geo/lift":
            out = vn_linear(x, p["geo/lift"])
        elif name == "geo/out":
            out = vn_linear(x, p["geo/out"])
        elif name.endswith("/attention"):
            b = name.split("/")[1]
            out = T.add(x, vn_attention(x, p[f"geo/{b}/att/wq"],
                                        p[f"geo/{b}/att/wk"],
                                        p[f"geo/{b}/att/wv"]))
        elif name.endswith("/mlp"):
            b = name.split("/")[1]
            h = vn_linear(x, p[f"geo/{b}/mlp/w1"])
            h = vn_nonlinearity(h, p[f"geo/{b}/mlp/dir"])
            out = T.add(x, vn_linear(h, p[f"geo/{b}/mlp/w2"]))
        elif name.endswith("/norm1") or name.endswith("/norm2"):
            out = vn_mean_norm(x)
        else:
            raise KeyError(f"unknown geo layer {name!r}")
        return self._fault(name, out)

    def geo_encode(self, positions: np.ndarray, normals: np.ndarray) -> T.Array:
        """(N,3)+(N,3) -> equivariant features (N, C_geo, 3)."""
        if len(positions) == 0:
            raise ValueError("geo_encode requires at least one point")
        if self.config.geo_backbone == "mlp":
            return self._geo_encode_mlp(positions, normals)
        x = self._const(np.stack([positions, normals], axis=1))
        for name, _ in self.geo_layers():
            x = self.geo_layer_apply(name, x)
        return x

    def _geo_encode_mlp(self, positions, normals) -> T.Array:
        p = self.params
        x = self._const(np.concatenate([positions, normals], axis=1))
        h = T.relu(T.add(T.matmul(x, p["geo/mlp/w1"]), p["geo/mlp/b1"]))
        h = T.relu(T.add(T.matmul(h, p["geo/mlp/w2"]), p["geo/mlp/b2"]))
        h = T.add(T.matmul(h, p["geo/mlp/w3"]), p["geo/mlp/b3"])
        return T.reshape(h, (len(positions), self.config.geo_channels, 3))

    # -- color branch

    def rgb_encode(self, colors: np.ndarray) -> T.Array:
        """(N,3) colors -> invariant features (N, C_rgb, 3).

        Coordinates never enter, so a rotation of the fragment leaves the
        output bit-identical. Scalar transformer features are expanded to
        the vector axis by fixed learned per-channel directions.
        """
        p = self.params
        cr = self.config.rgb_channels
        s = self._rgb_scalars(colors)
        n = s.shape[0]
        expanded = T.mul(T.reshape(s, (n, cr, 1)),
                         T.reshape(p["rgb/expand"], (1, cr, 3)))
        return expanded

    def _rgb_scalars(self, colors: np.ndarray) -> T.Array:
        p = self.params
        x = T.add(T.matmul(self._const(colors), p["rgb/embed/w"]), p["rgb/embed/b"])
        for b in range(self.config.rgb_blocks):
            pre = f"rgb/block{b}"
            h = T.layer_norm(x, p[f"{pre}/ln1/g"], p[f"{pre}/ln1/b"])
            x = T.add(x, self._scalar_attention(h, pre))
            h = T.layer_norm(x, p[f"{pre}/ln2/g"], p[f"{pre}/ln2/b"])
            h = T.relu(T.add(T.matmul(h, p[f"{pre}/mlp/w1"]), p[f"{pre}/mlp/b1"]))
            h = T.add(T.matmul(h, p[f"{pre}/mlp/w2"]), p[f"{pre}/mlp/b2"])
            x = T.add(x, h)
        return x

    def _scalar_attention(self, x: T.Array, pre: str) -> T.Array:
        p = self.params
        d = self.config.rgb_channels
        q = T.matmul(x, p[f"{pre}/att/wq"])
        k = T.matmul(x, p[f"{pre}/att/wk"])
        v = T.matmul(x, p[f"{pre}/att/wv"])
        logits = T.mul(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / np.sqrt(d))
        out = T.matmul(T.softmax(logits, axis=-1), v)
        return T.matmul(out, p[f"{pre}/att/wo"])

    # -- fusion and heads

    def fuse(self, geo: T.Array, rgb: T.Array) -> T.Array:
        if geo.shape[0] != rgb.shape[0]:
            raise ValueError(f"point count mismatch: {geo.shape[0]} vs {rgb.shape[0]}")
        return T.concat([geo, rgb], axis=1)

    def encode_fragment(self, f: Fragment) -> T.Array:
        """Fragment -> fused embedding (N, C_geo + C_rgb, 3)."""
        return self.fuse(self.geo_encode(f.positions, f.normals),
                         self.rgb_encode(f.colors))

    def positional_enrich(self, h: T.Array, f: Fragment) -> T.Array:
        """Fused embedding + Fourier features -> per-point tokens (N, D)."""
        p = self.params
        n, c = h.shape[0], h.shape[1]
        bands = self.config.pe_bands
        pe_xyz = positional_encoding(f.positions, bands)
        pe_n = positional_encoding(f.normals, bands)
        pe_s = np.broadcast_to(positional_encoding([f.scale], bands), (n, 2 * bands))
        flat = T.reshape(h, (n, c * 3))
        feats = T.concat([flat, self._const(pe_xyz), self._const(pe_n),
                          self._const(pe_s)], axis=1)
        t = T.relu(T.add(T.matmul(feats, p["shape/w1"]), p["shape/b1"]))
        return T.add(T.matmul(t, p["shape/w2"]), p["shape/b2"])

    def color_keyed_points(self, f: Fragment,
                           probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Boundary-gated positions pooled under the fixed RGB kernels.

        Returns (points, masses): points (n_anchors, 3) are weighted mean
        positions, each scaled by its anchor's relative mass so dead
        anchors contribute nothing; masses (n_anchors,) are those
        relative weights. Colors and boundary probabilities are rotation
        invariant, so under a rotation of the fragment the points rotate
        exactly and the masses are unchanged.
        """
        c = self.config
        p = np.asarray(probs, dtype=np.float64).reshape(-1) ** c.anchor_gamma
        d2 = ((f.colors[:, None, :] - c.anchor_colors()[None]) ** 2).sum(-1)
        w = p[:, None] * np.exp(-d2 / (2.0 * c.anchor_tau ** 2))
        tot = w.sum(axis=0)
        pts = (w[:, :, None] * f.positions[:, None, :]).sum(axis=0) \
            / (tot[:, None] + 1e-9)
        mass = tot / len(f)
        s = mass / (mass.mean() + 1e-12)
        return s[:, None] * pts, s

    def fragment_token(self, f: Fragment, is_anchor: bool = False,
                       n_points: int = 192) -> T.Array:
        """Pooled per-fragment conditioning token (token_width,).

        The fragment is subsampled twice: n_points for the feature
        pooling and config.anchor_points for the color-keyed block,
        which needs denser coverage of the fracture region. The leading
        vector channels (mean geometry features and color-keyed points)
        give a smooth, exactly-equivariant view of orientation; the
        invariant tail carries texture, anchor masses and shape cues.
        """
        from .fragments.core import sample_points

        sub = sample_points(f, min(n_points, len(f)))
        h = self.encode_fragment(sub)
        enriched = self.positional_enrich(h, sub)
        cg = self.config.geo_channels
        n, c = h.shape[0], h.shape[1]
        geo = T.mean(T.reshape(T.slice_axis(h, 1, 0, cg), (n, cg * 3)), axis=0)
        rgb = T.mean(T.reshape(T.slice_axis(h, 1, cg, c), (n, (c - cg) * 3)),
                     axis=0)
        inv = T.mean(enriched, axis=0)
        if is_anchor:
            inv = T.add(inv, self.params["anchor/flag"])

        sub_a = sample_points(f, min(self.config.anchor_points, len(f)))
        probs = self.segment_boundary(self.encode_fragment(sub_a)).data
        pts, mass = self.color_keyed_points(sub_a, probs)
        return T.concat([geo, self._const(pts.reshape(-1)), rgb,
                         self._const(mass), inv], axis=0)

    def segment_boundary(self, h: T.Array) -> T.Array:
        """Fused embedding -> per-point fracture probability (N,).

        Reads only rotation-invariant functions of the embedding: the
        Gram matrix of projected geometry channels and the (already
        invariant) color block.
        """
        p = self.params
        cg = self.config.geo_channels
        n = h.shape[0]
        geo = T.slice_axis(h, 1, 0, cg)
        rgb = T.slice_axis(h, 1, cg, h.shape[1])
        proj = vn_linear(geo, p["seg/proj"])
        gram = T.matmul(proj, T.transpose(proj, (0, 2, 1)))
        k = self.config.seg_proj
        feats = T.concat([T.reshape(gram, (n, k * k)),
                          T.reshape(rgb, (n, (h.shape[1] - cg) * 3))], axis=1)
        z = T.relu(T.add(T.matmul(feats, p["seg/w1"]), p["seg/b1"]))
        z = T.add(T.matmul(z, p["seg/w2"]), p["seg/b2"])
        return T.reshape(T.sigmoid(z), (n,))

    # -- persistence

    def state_entries(self, prefix: str = "encoder") -> dict[str, np.ndarray]:
        return {f"{prefix}/{k}": v.data for k, v in self.params.items()}

    def load_state_entries(self, entries: dict[str, np.ndarray],
                           prefix: str = "encoder") -> None:
        for k, v in self.params.items():
            key = f"{prefix}/{k}"
            if key not in entries:
                raise KeyError(f"checkpoint missing {key}")
            data = np.asarray(entries[key], dtype=self.dtype)
            if data.shape != v.data.shape:
                raise ValueError(f"{key}: shape {data.shape} != {v.data.shape}")
            v.data = data


# ------------------------------------------------------- boundary pretraining


def boundary_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic; ties get mid-ranks.

    Degenerate label sets (all one class) return nan rather than raising,
    since individual fragments may lack boundary points.
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(probs, kind="stable")
    ranks = np.empty(probs.size, dtype=np.float64)
    ranks[order] = np.arange(1, probs.size + 1)
    # average ranks within tied groups so the statistic is exact
    sorted_p = probs[order]
    i = 0
    while i < probs.size:
        j = i
        while j + 1 < probs.size and sorted_p[j + 1] == sorted_p[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


@dataclass
class PretrainConfig:
    steps: int = 300
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    points_per_fragment: int = 96
    batch_fragments: int = 4
    seed: int = 0
    log_path: str | None = None
    log_every: int = 10

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_fragments < 1:
            raise ConfigError("batch_fragments must be >= 1")
        if self.points_per_fragment < 4:
            raise ConfigError("points_per_fragment must be >= 4")


def pretrain_segmentation(objects, encoder: FragmentEncoder,
                          cfg: PretrainConfig,
                          optimizer: T.Adam | None = None,
                          start_step: int = 0):
    """Fit the encoder to per-point fracture-boundary classification.

    Binary cross-entropy through the segmentation head; every step draws
    its batch from default_rng((seed, step)) so resumed runs continue the
    exact trace. Returns (encoder, rows) with rows of
    (step, bce, auc, wall_ms); auc is computed on the step's own batch.
    """
    frags = [f for o in objects for f in o.fragments]
    if not frags:
        raise ConfigError("pretraining requires at least one fragment")
    for i, f in enumerate(frags):
        if f.boundary_label is None:
            raise DataError(f"fragment {i} has no boundary labels")
    if optimizer is None:
        optimizer = T.Adam(encoder.params, lr=cfg.lr, betas=cfg.betas)

    log_file = None
    writer = None
    if cfg.log_path is not None:
        path = Path(cfg.log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or start_step == 0
        log_file = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["step", "bce", "auc", "wall_ms"])

    eps = 1e-7
    rows = []
    try:
        for s in range(start_step, start_step + cfg.steps):
            t0 = time.perf_counter()
            rng = np.random.default_rng((cfg.seed, s))
            terms = []
            all_p, all_y = [], []
            for _ in range(cfg.batch_fragments):
                f = frags[int(rng.integers(len(frags)))]
                k = min(cfg.points_per_fragment, len(f))
                idx = rng.choice(len(f), size=k, replace=False)
                sub = f.take(np.sort(idx))
                probs = encoder.segment_boundary(encoder.encode_fragment(sub))
                y = sub.boundary_label.astype(encoder.dtype)
                yk = T.constant(y)
                p_c = T.clamp(probs, eps, 1.0 - eps)
                bce = T.neg(T.mean(T.add(
                    T.mul(yk, T.log(p_c)),
                    T.mul(T.sub(1.0, yk), T.log(T.sub(1.0, p_c))))))
                terms.append(T.reshape(bce, (1,)))
                all_p.append(probs.data.copy())
                all_y.append(y)
            loss = T.mean(T.concat(terms, axis=0))
            val = float(loss.data)
            if not np.isfinite(val):
                raise TrainingDiverged(f"pretrain step {s}: loss non-finite")
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step()
            auc = boundary_auc(np.concatenate(all_p), np.concatenate(all_y))
            wall_ms = (time.perf_counter() - t0) * 1e3
            rows.append((s, val, auc, wall_ms))
            if writer is not None and s % cfg.log_every == 0:
                writer.writerow([s, f"{val:.6g}", f"{auc:.4f}", f"{wall_ms:.1f}"])
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return encoder, rows
