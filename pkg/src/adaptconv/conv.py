"""Adaptive graph convolution and the fixed-kernel layers it is compared with.

All layers consume the same edge input ``[f_i, f_j - f_i]`` built from a
:class:`~adaptconv.graph.NeighborGraph` whose column 0 is the self-loop.
"""
import logging
import math

import numpy as np

from adaptconv import kernels as _kernels
from adaptconv.tensor import (
    BatchNorm,
    ConfigError,
    DimensionError,
    Module,
    Tensor,
    affine,
    as_tensor,
    concat,
    edge_affine,
    edge_inner_product,
    gather_rows,
    leaky_relu,
    note_branch,
    mul,
    reduce_max_axis,
    reshape,
    softmax,
    sub,
    total,
    _node,
)

log = logging.getLogger(__name__)

SPATIAL = "spatial"
FEATURE = "feature"
NORMAL = "normal"
INITIAL = "initial"
VARIANTS = (SPATIAL, FEATURE, NORMAL, INITIAL)

# bytes of edge kernel tensor above which the feature variant warns
FEATURE_MEMORY_WARN = 256 * 2**20
# edges per block in the fused AdaptConv op; keeps temporaries cache-sized
EDGE_CHUNK = 2048


def geometry_width(variant, d_in):
    """Width C of the edge geometry vector each kernel row is dotted with."""
    if variant == SPATIAL or variant == NORMAL:
        return 6
    if variant == INITIAL:
        return 12
    if variant == FEATURE:
        return 2 * d_in
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def point_geometry(positions, normals, variant):
    """Per-point values whose edge differences feed the kernel product.

    Returns None for the feature variant, which reuses the edge features.
    """
    if variant == SPATIAL:
        return positions
    if variant == FEATURE:
        return None
    if normals is None:
        raise ConfigError(f"variant {variant!r} needs point normals")
    if variant == NORMAL:
        return normals
    if variant == INITIAL:
        return np.concatenate([positions, normals], axis=1)
    raise ConfigError(f"unknown variant {variant!r}")


def delta_pairs(values, idx):
    """(R, k, 2W) edge inputs [v_i, v_j - v_i] with i = idx[:, 0]."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    centre = gather_rows(values, np.repeat(idx[:, :1], idx.shape[1], axis=1))
    neigh = gather_rows(values, idx)
    return concat([centre, sub(neigh, centre)], axis=-1)


def _weight(rng, fan_in, fan_out, gain=math.sqrt(2.0 / (1 + 0.2**2))):
    return Tensor(rng.normal(0.0, gain / math.sqrt(fan_in), (fan_in, fan_out)),
                  requires_grad=True)


def _bias(width):
    return Tensor(np.zeros(width), requires_grad=True)


def _split(w, d):
    return w[:d] - w[d:], w[d:]


def adaptive_edge_response(features, idx, delta_g, layer):
    """Pre-normalisation edge responses <kernel_ij[m], delta_g_ij> as (R, k, M).

    Numerically the same as
    ``edge_inner_product(layer.kernels(delta_pairs(features, idx)), delta_g)``
    but evaluated in blocks of edges, never holding the full (R, k, M, C)
    kernel tensor; the backward pass regenerates each block's kernels.
    """
    features, delta_g = as_tensor(features), as_tensor(delta_g)
    idx = np.asarray(idx, dtype=np.int64)
    v = features.data
    n, d = v.shape
    r, k = idx.shape
    m, c, hdim, slope = layer.m, layer.c, layer.hidden, layer.slope
    mc = m * c
    if d != layer.d_in:
        raise DimensionError(f"AdaptConv expects features of width {layer.d_in}, got {v.shape}")
    if delta_g.shape != (r, k, c):
        raise DimensionError(f"edge geometry {delta_g.shape} does not match ({r}, {k}, {c})")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"neighbour index outside [0, {n})")
    if layer.variant == FEATURE and r * k * mc * 8 > FEATURE_MEMORY_WARN:
        log.warning("feature variant edge kernels would need %.0f MiB unfused",
                    r * k * mc * 8 / 2**20)
    a0, b0m = _split(layer.w0.data, d)
    ar, brm = _split(layer.wr.data, d)
    p, q = v @ a0, v @ b0m
    pr, qr = v @ ar, v @ brm
    w1, b1, b0 = layer.w1.data, layer.b1.data, layer.b0.data
    res_bias = b1 + layer.br.data
    geom = delta_g.data.reshape(r * k, c)
    centres = idx[:, 0]
    step = max(1, EDGE_CHUNK // k)

    def block(r0, r1):
        ix, cen = idx[r0:r1], centres[r0:r1]
        rows = (r1 - r0) * k
        pre = (q[ix] + p[cen][:, None, :] + b0).reshape(rows, hdim)
        hid = np.where(pre >= 0.0, pre, slope * pre)
        kern = (hid @ w1).reshape(r1 - r0, k, mc)
        kern += qr[ix]
        kern += (pr[cen] + res_bias)[:, None, :]
        return pre, hid, kern.reshape(rows, m, c)

    out = np.empty((r, k, m))
    for r0 in range(0, r, step):
        r1 = min(r, r0 + step)
        pre, _, kern = block(r0, r1)
        note_branch(pre >= 0.0)
        g = geom[r0 * k:r1 * k]
        out[r0:r1] = np.matmul(kern, g[:, :, None]).reshape(r1 - r0, k, m)

    def bw(grad):
        gp, gq = np.zeros((n, hdim)), np.zeros((n, hdim))
        gpr, gqr = np.zeros((n, mc)), np.zeros((n, mc))
        gw1, gb1, gb0 = np.zeros((hdim, mc)), np.zeros(mc), np.zeros(hdim)
        ggeom = np.empty((r * k, c)) if delta_g.requires_grad else None
        for r0 in range(0, r, step):
            r1 = min(r, r0 + step)
            ix, cen = idx[r0:r1], centres[r0:r1]
            pre, hid, kern = block(r0, r1)
            e0, e1 = r0 * k, r1 * k
            gh = grad[r0:r1].reshape(e1 - e0, m)
            gkern = (gh[:, :, None] * geom[e0:e1, None, :]).reshape(e1 - e0, mc)
            if ggeom is not None:
                ggeom[e0:e1] = np.matmul(gh[:, None, :], kern)[:, 0, :]
            gw1 += hid.T @ gkern
            gb1 += gkern.sum(axis=0)
            _kernels.scatter_add_into(gpr, cen, gkern.reshape(r1 - r0, k, mc).sum(axis=1))
            _kernels.scatter_add_into(gqr, ix.ravel(), gkern)
            ghid = gkern @ w1.T
            gpre = np.where(pre >= 0.0, ghid, slope * ghid)
            gb0 += gpre.sum(axis=0)
            _kernels.scatter_add_into(gp, cen, gpre.reshape(r1 - r0, k, hdim).sum(axis=1))
            _kernels.scatter_add_into(gq, ix.ravel(), gpre)
        gv = gp @ a0.T + gq @ b0m.T + gpr @ ar.T + gqr @ brm.T
        vtp, vtpr = v.T @ gp, v.T @ gpr
        gw0 = np.concatenate([vtp, v.T @ gq - vtp], axis=0)
        gwr = np.concatenate([vtpr, v.T @ gqr - vtpr], axis=0)
        return (gv, None if ggeom is None else ggeom.reshape(r, k, c),
                gw0, gb0, gw1, gb1, gwr, gb1.copy())

    parents = (features, delta_g, layer.w0, layer.b0, layer.w1, layer.b1, layer.wr, layer.br)
    return _node(out, parents, bw, "adaptive_edge_response")


class AdaptConvLayer(Module):
    """Edge kernels generated from the edge features, dotted with edge geometry.

    The M per-channel kernel functions share one MLP whose output (M * C) is
    reshaped to M kernels of width C. The MLP is two affine maps with a
    LeakyReLU between, plus an affine residual path from input to output.
    """

    def __init__(self, d_in, m, variant=SPATIAL, hidden=None, norm=True, slope=0.2,
                 rng=None, bn_eps=1e-5, bn_momentum=0.9):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.m, self.variant = d_in, m, variant
        self.c = geometry_width(variant, d_in)
        self.hidden = hidden if hidden is not None else max(1, (m * self.c) // 2)
        self.slope = slope
        two_d, mc = 2 * d_in, m * self.c
        self.w0 = _weight(rng, two_d, self.hidden)
        self.b0 = _bias(self.hidden)
        self.w1 = _weight(rng, self.hidden, mc, gain=1.0)
        self.b1 = _bias(mc)
        self.wr = _weight(rng, two_d, mc, gain=1.0)
        self.br = _bias(mc)
        self.norm = BatchNorm(m, bn_eps, bn_momentum) if norm else None

    @staticmethod
    def parameter_count(d_in, m, c, hidden, norm=True):
        two_d, mc = 2 * d_in, m * c
        return (two_d * hidden + hidden) + (hidden * mc + mc) + (two_d * mc + mc) + (2 * m if norm else 0)

    def kernels(self, delta_f):
        """(R, k, M, C) kernels for the (R, k, 2D) edge inputs."""
        if delta_f.shape[-1] != 2 * self.d_in:
            raise DimensionError(
                f"AdaptConv expects edge inputs of width {2 * self.d_in}, got {delta_f.shape}")
        r, k = delta_f.shape[:2]
        if self.variant == FEATURE and r * k * self.m * self.c * 8 > FEATURE_MEMORY_WARN:
            log.warning("feature variant edge kernels need %.0f MiB",
                        r * k * self.m * self.c * 8 / 2**20)
        hidden = leaky_relu(affine(delta_f, self.w0, self.b0), self.slope)
        flat = affine(hidden, self.w1, self.b1) + affine(delta_f, self.wr, self.br)
        return reshape(flat, (r, k, self.m, self.c))

    def edge_responses(self, features, idx, geometry=None, training=False):
        idx = np.asarray(idx, dtype=np.int64)
        if self.variant == FEATURE:
            delta_g = delta_pairs(features, idx)
        else:
            if geometry is None:
                raise ConfigError(f"variant {self.variant!r} needs point geometry")
            if 2 * np.shape(geometry)[-1] != self.c:
                raise ConfigError(f"geometry width {np.shape(geometry)[-1]} does not match "
                                  f"kernel width {self.c} of variant {self.variant!r}")
            delta_g = delta_pairs(geometry, idx)
        h = adaptive_edge_response(features, idx, delta_g, self)
        if self.norm is not None:
            h = self.norm(h, training)
        return leaky_relu(h, self.slope)

    def __call__(self, features, idx, geometry=None, training=False):
        out, _ = reduce_max_axis(self.edge_responses(features, idx, geometry, training), axis=1)
        return out


class GraphConvLayer(Module):
    """Fixed-kernel edge convolution: max_j LeakyReLU(norm(W [f_i, f_j - f_i] + b)).

    The bias is dropped when batch norm follows, since norm cancels it.
    """

    def __init__(self, d_in, m, norm=True, slope=0.2, rng=None, bn_eps=1e-5, bn_momentum=0.9):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.m, self.slope = d_in, m, slope
        self.w = _weight(rng, 2 * d_in, m)
        self.b = None if norm else _bias(m)
        self.norm = BatchNorm(m, bn_eps, bn_momentum) if norm else None

    @staticmethod
    def parameter_count(d_in, m, norm=True):
        return 2 * d_in * m + (2 * m if norm else m)

    def edge_responses(self, features, idx, geometry=None, training=False):
        features = as_tensor(features)
        if features.shape[-1] != self.d_in:
            raise DimensionError(f"GraphConv expects width {self.d_in}, got {features.shape}")
        h = edge_affine(features, idx, self.w, self.b)
        if self.norm is not None:
            h = self.norm(h, training)
        return leaky_relu(h, self.slope)

    def __call__(self, features, idx, geometry=None, training=False):
        out, _ = reduce_max_axis(self.edge_responses(features, idx, geometry, training), axis=1)
        return out


class AttentionLayer(Module):
    """Softmax-weighted neighbourhood sum of fixed-kernel edge features.

    ``mode="point"`` scores each edge with one scalar; ``mode="channel"``
    scores every output channel separately. The score is a two-layer MLP
    (hidden width M) of the edge input. A linear score would be blind to the
    centre half of [f_i, f_j - f_i], which the softmax cancels; the output
    layer has no bias for the same reason.
    """

    def __init__(self, d_in, m, mode="point", norm=True, slope=0.2, rng=None,
                 bn_eps=1e-5, bn_momentum=0.9):
        if mode not in ("point", "channel"):
            raise ConfigError(f"attention mode must be 'point' or 'channel', got {mode!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.m, self.mode, self.slope = d_in, m, mode, slope
        self.w = _weight(rng, 2 * d_in, m)
        self.b = None if norm else _bias(m)
        self.ws0 = _weight(rng, 2 * d_in, m)
        self.bs0 = _bias(m)
        self.ws1 = _weight(rng, m, 1 if mode == "point" else m, gain=1.0)
        self.norm = BatchNorm(m, bn_eps, bn_momentum) if norm else None

    @staticmethod
    def parameter_count(d_in, m, mode="point", norm=True):
        width = 1 if mode == "point" else m
        return 2 * d_in * m + (2 * m if norm else m) + (2 * d_in * m + m) + m * width

    def weights(self, features, idx):
        hidden = leaky_relu(edge_affine(as_tensor(features), idx, self.ws0, self.bs0), self.slope)
        return softmax(affine(hidden, self.ws1), axis=1)

    def candidates(self, features, idx, training=False):
        h = edge_affine(as_tensor(features), idx, self.w, self.b)
        if self.norm is not None:
            h = self.norm(h, training)
        return leaky_relu(h, self.slope)

    def __call__(self, features, idx, geometry=None, training=False):
        features = as_tensor(features)
        if features.shape[-1] != self.d_in:
            raise DimensionError(f"attention expects width {self.d_in}, got {features.shape}")
        idx = np.asarray(idx, dtype=np.int64)
        return total(mul(self.weights(features, idx), self.candidates(features, idx, training)),
                     axis=1)


LAYER_KINDS = ("adapt", "graph", "attn_point", "attn_channel")


def make_layer(kind, d_in, m, variant=SPATIAL, hidden=None, norm=True, slope=0.2, rng=None,
               bn_eps=1e-5, bn_momentum=0.9):
    common = dict(norm=norm, slope=slope, rng=rng, bn_eps=bn_eps, bn_momentum=bn_momentum)
    if kind == "adapt":
        return AdaptConvLayer(d_in, m, variant, hidden, **common)
    if kind == "graph":
        return GraphConvLayer(d_in, m, **common)
    if kind == "attn_point":
        return AttentionLayer(d_in, m, "point", **common)
    if kind == "attn_channel":
        return AttentionLayer(d_in, m, "channel", **common)
    raise ConfigError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


def adaptconv_forward(cloud, features, graph, layer, variant=None, training=False):
    """One AdaptConv layer applied to a single cloud."""
    variant = layer.variant if variant is None else variant
    if variant != layer.variant:
        raise ConfigError(f"layer was built for variant {layer.variant!r}, not {variant!r}")
    geometry = point_geometry(cloud.positions, cloud.normals, variant)
    return layer(features, graph.idx, geometry, training)


def graphconv_forward(features, graph, layer, training=False):
    return layer(features, graph.idx, None, training)


def attention_forward(features, graph, layer, training=False):
    return layer(features, graph.idx, None, training)
