"""Classification (dynamic graph) and segmentation (pooling pyramid) networks.

Both networks run on a batch of B clouds with N points each, stacked
row-wise into (B*N, D) feature matrices. Neighbour indices are global row
numbers, so every graph op works on the whole batch at once.
"""
import math

import numpy as np

from adaptconv import conv
from adaptconv.config import RunConfig, stream
from adaptconv.graph import (
    batch_knn,
    farthest_point_sample,
    fps_start_index,
    nearest_index,
    pool_neighborhoods,
    pooled_size,
)
from adaptconv.tensor import (
    BatchNorm,
    ConfigError,
    Module,
    Tensor,
    affine,
    concat,
    dropout,
    gather_rows,
    leaky_relu,
    reduce_max_axis,
    reshape,
)


class Dense(Module):
    """Affine map, optionally followed by batch norm and LeakyReLU."""

    def __init__(self, d_in, d_out, rng, norm=True, act=True, slope=0.2, bn_eps=1e-5,
                 bn_momentum=0.9, center=True):
        gain = math.sqrt(2.0 / (1 + slope**2)) if act else 1.0
        self.w = Tensor(rng.normal(0.0, gain / math.sqrt(d_in), (d_in, d_out)),
                        requires_grad=True)
        self.b = None if norm else Tensor(np.zeros(d_out), requires_grad=True)
        self.norm = BatchNorm(d_out, bn_eps, bn_momentum, center) if norm else None
        self.act, self.slope = act, slope

    @staticmethod
    def parameter_count(d_in, d_out, norm=True, center=True):
        if not norm:
            return d_in * d_out + d_out
        return d_in * d_out + (2 * d_out if center else d_out)

    def __call__(self, x, training=False):
        y = affine(x, self.w, self.b)
        if self.norm is not None:
            y = self.norm(y, training)
        return leaky_relu(y, self.slope) if self.act else y


def _layer_kwargs(cfg):
    return dict(norm=cfg.norm, slope=cfg.leaky_slope, bn_eps=cfg.bn_eps,
                bn_momentum=cfg.bn_momentum)


def _build_convs(cfg, in_width, rng):
    layers, d = [], in_width
    for kind, width in zip(cfg.resolved_kinds(), cfg.widths):
        layers.append(conv.make_layer(kind, d, int(width), cfg.variant, cfg.kernel_hidden,
                                      rng=rng, **_layer_kwargs(cfg)))
        d = int(width)
    return layers


def conv_parameter_count(kind, d_in, m, cfg):
    """Closed-form parameter count of one conv layer."""
    if kind == "adapt":
        c = conv.geometry_width(cfg.variant, d_in)
        hidden = cfg.kernel_hidden if cfg.kernel_hidden is not None else max(1, m * c // 2)
        return conv.AdaptConvLayer.parameter_count(d_in, m, c, hidden, cfg.norm)
    if kind == "graph":
        return conv.GraphConvLayer.parameter_count(d_in, m, cfg.norm)
    if kind in ("attn_point", "attn_channel"):
        return conv.AttentionLayer.parameter_count(d_in, m, kind[5:], cfg.norm)
    raise ConfigError(f"unknown layer kind {kind!r}")


def _stack(clouds, attr):
    return np.concatenate([getattr(c, attr) for c in clouds], axis=0)


def _check_sizes(clouds, k):
    n = len(clouds[0])
    if any(len(c) != n for c in clouds):
        raise ConfigError("all clouds in a batch need the same point count")
    if n < k:
        raise ConfigError(f"cloud has {n} points, fewer than k={k}")
    return n


class ClassificationNet(Module):
    def __init__(self, cfg: RunConfig, num_classes, in_width=3, rng=None):
        rng = stream(cfg.seed, "init") if rng is None else rng
        self.cfg = cfg
        self.in_width, self.num_classes = in_width, num_classes
        self.convs = _build_convs(cfg, in_width, rng)
        kw = _layer_kwargs(cfg)
        # A shift here moves every cloud's pooled feature by the same amount,
        # which the head's batch norm removes again: keep it frozen at zero.
        self.agg_center = not (cfg.norm and len(cfg.head_widths) > 0)
        self.agg = Dense(sum(int(w) for w in cfg.widths), cfg.agg_width, rng,
                         center=self.agg_center, **kw)
        head, d = [], cfg.agg_width
        for w in cfg.head_widths:
            head.append(Dense(d, int(w), rng, **kw))
            d = int(w)
        self.head = head
        self.out = Dense(d, num_classes, rng, norm=False, act=False)

    def expected_parameter_count(self):
        cfg = self.cfg
        total, d = 0, self.in_width
        for kind, w in zip(cfg.resolved_kinds(), cfg.widths):
            total += conv_parameter_count(kind, d, int(w), cfg)
            d = int(w)
        total += Dense.parameter_count(sum(int(w) for w in cfg.widths), cfg.agg_width, cfg.norm,
                                       self.agg_center)
        d = cfg.agg_width
        for w in cfg.head_widths:
            total += Dense.parameter_count(d, int(w), cfg.norm)
            d = int(w)
        return total + Dense.parameter_count(d, self.num_classes, norm=False)

    def input_features(self, clouds):
        return _stack(clouds, "positions") if self.in_width == 3 else _stack(clouds, "attributes")

    def forward(self, clouds, training=False, rng=None, return_layers=False):
        """Logits (B, classes) for a list of equally sized clouds."""
        cfg = self.cfg
        n = _check_sizes(clouds, cfg.k)
        b = len(clouds)
        pos = _stack(clouds, "positions")
        normals = None if clouds[0].normals is None else _stack(clouds, "normals")
        geometry = conv.point_geometry(pos, normals, cfg.variant)
        f = Tensor(self.input_features(clouds))
        spatial = batch_knn(pos, b, cfg.k)
        layers = []
        for i, layer in enumerate(self.convs):
            graph = spatial if i == 0 or not cfg.dynamic_graph else batch_knn(f.data, b, cfg.k)
            f = layer(f, graph.idx, geometry, training)
            layers.append(f)
        x = self.agg(concat(layers, axis=1), training)
        x, _ = reduce_max_axis(reshape(x, (b, n, cfg.agg_width)), axis=1)
        for dense in self.head:
            x = dense(x, training)
            if training and cfg.dropout > 0:
                x = dropout(x, cfg.dropout, rng)
        logits = self.out(x, training)
        return (logits, layers) if return_layers else logits


def classification_forward(cloud, net):
    """Eval-mode logits for one cloud."""
    return net.forward([cloud]).data[0]


class SegmentationNet(Module):
    def __init__(self, cfg: RunConfig, num_parts, num_categories=0, in_width=3, rng=None):
        rng = stream(cfg.seed, "init") if rng is None else rng
        self.cfg = cfg
        self.in_width, self.num_parts, self.num_categories = in_width, num_parts, num_categories
        self.convs = _build_convs(cfg, in_width, rng)
        kw = _layer_kwargs(cfg)
        self.pools = []
        if cfg.pool_mode == "adapt":
            for p in cfg.pool_after:
                w = int(cfg.widths[p])
                self.pools.append(conv.AdaptConvLayer(w, w, cfg.variant, cfg.kernel_hidden,
                                                      rng=rng, **kw))
        dec, d = [], sum(int(w) for w in cfg.widths) + num_categories
        for w in cfg.decoder_widths:
            dec.append(Dense(d, int(w), rng, **kw))
            d = int(w)
        self.decoder = dec
        self.out = Dense(d, num_parts, rng, norm=False, act=False)

    def expected_parameter_count(self):
        cfg = self.cfg
        total, d = 0, self.in_width
        for kind, w in zip(cfg.resolved_kinds(), cfg.widths):
            total += conv_parameter_count(kind, d, int(w), cfg)
            d = int(w)
        if cfg.pool_mode == "adapt":
            for p in cfg.pool_after:
                total += conv_parameter_count("adapt", int(cfg.widths[p]), int(cfg.widths[p]), cfg)
        d = sum(int(w) for w in cfg.widths) + self.num_categories
        for w in cfg.decoder_widths:
            total += Dense.parameter_count(d, int(w), cfg.norm)
            d = int(w)
        return total + Dense.parameter_count(d, self.num_parts, norm=False)

    def input_features(self, clouds):
        return _stack(clouds, "positions") if self.in_width == 3 else _stack(clouds, "attributes")

    def pyramid(self, clouds):
        """Per-level positions, normals, sampled rows and upsampling indices.

        Level 0 is the full batch. Level l+1 keeps ceil(n_l / rate) points of
        each cloud chosen by FPS. ``up[l]`` maps every full-resolution row to
        its nearest level-l row.
        """
        cfg = self.cfg
        b, n = len(clouds), len(clouds[0])
        pos = [c.positions for c in clouds]
        nrm = [c.normals for c in clouds]
        full = list(pos)
        levels = [dict(n=n, pos=pos, normals=nrm, up=np.arange(b * n))]
        pool_k = cfg.pool_k or cfg.k
        for _ in cfg.pool_after:
            cur = levels[-1]
            count = pooled_size(cur["n"], cfg.pool_rate)
            sampled, rows, new_pos, new_nrm, up = [], [], [], [], []
            for i in range(b):
                p = cur["pos"][i]
                s = farthest_point_sample(p, count, fps_start_index(p, cfg.fps_start))
                sampled.append(s + i * cur["n"])
                rows.append(pool_neighborhoods(p, s, min(pool_k, cur["n"])) + i * cur["n"])
                new_pos.append(p[s])
                new_nrm.append(None if cur["normals"][i] is None else cur["normals"][i][s])
                up.append(nearest_index(p[s], full[i]) + i * count)
            cur["pool_rows"] = np.concatenate(rows)
            levels.append(dict(n=count, pos=new_pos, normals=new_nrm, up=np.concatenate(up)))
        return levels

    def forward(self, clouds, training=False, rng=None, return_layers=False):
        """Per-point logits (B, N, parts)."""
        cfg = self.cfg
        n = _check_sizes(clouds, cfg.k)
        b = len(clouds)
        if self.num_categories:
            if any(c.category is None for c in clouds):
                raise ConfigError("segmentation net needs each cloud's category one-hot")
            onehot = np.repeat(np.stack([c.category_onehot for c in clouds]), n, axis=0)
        levels = self.pyramid(clouds)
        f = Tensor(self.input_features(clouds))
        level, graph = 0, None
        outputs = []
        pools = iter(self.pools)
        for i, layer in enumerate(self.convs):
            lv = levels[level]
            pos = np.concatenate(lv["pos"])
            normals = None if lv["normals"][0] is None else np.concatenate(lv["normals"])
            geometry = conv.point_geometry(pos, normals, cfg.variant)
            if graph is None:
                graph = batch_knn(pos, b, cfg.k)
            f = layer(f, graph.idx, geometry, training)
            outputs.append((f, level))
            if i in cfg.pool_after:
                rows = lv["pool_rows"]
                if cfg.pool_mode == "adapt":
                    f = next(pools)(f, rows, geometry, training)
                else:
                    f, _ = reduce_max_axis(gather_rows(f, rows), axis=1)
                level, graph = level + 1, None
        feats = [o if lvl == 0 else gather_rows(o, levels[lvl]["up"]) for o, lvl in outputs]
        if self.num_categories:
            feats.append(Tensor(onehot))
        x = concat(feats, axis=1)
        for dense in self.decoder:
            x = dense(x, training)
        logits = reshape(self.out(x, training), (b, n, self.num_parts))
        return (logits, [o for o, _ in outputs]) if return_layers else logits


def segmentation_forward(cloud, net):
    """Eval-mode per-point logits (N, parts) for one cloud."""
    return net.forward([cloud]).data[0]


def count_parameters(net):
    return net.param_store().count()


def build_net(cfg, num_classes, num_categories=0, in_width=3):
    if cfg.task == "cls":
        return ClassificationNet(cfg, num_classes, in_width)
    return SegmentationNet(cfg, num_classes, num_categories, in_width)


def model_info(net):
    """Plain-text table: one row per named tensor group plus the total."""
    rows = []
    groups = {}
    for name, t in net.param_store().items():
        if not t.requires_grad:
            continue
        key = name.rsplit(".", 1)[0] if "." in name else name
        groups.setdefault(key, 0)
        groups[key] += t.data.size
    width = max([len(k) for k in groups] + [5])
    rows.append(f"{'layer':<{width}}  parameters")
    for key, cnt in groups.items():
        rows.append(f"{key:<{width}}  {cnt}")
    rows.append(f"{'total':<{width}}  {count_parameters(net)}")
    return "\n".join(rows) + "\n"
