"""Central finite-difference checks of every differentiable op and layer.

Each case builds a scalar loss (a fixed random weighting of the op output)
from a handful of parameter tensors. Every entry is perturbed by +/-step; the
perturbation is skipped when it flips any recorded branch (LeakyReLU sign,
max position, kNN list), since the derivative is undefined across a kink.
"""
import time
from dataclasses import dataclass

import numpy as np

from adaptconv import conv, graph, tensor as T
from adaptconv.config import RunConfig
from adaptconv.net import ClassificationNet, SegmentationNet
from adaptconv.tensor import Tensor, backward

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    worst: float
    param: str
    checked: int
    skipped: int
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.checked > 0 and self.worst <= self.tolerance


def _eval(build):
    T._branches = []
    try:
        loss = float(build().data)
        return loss, T._branches
    finally:
        T._branches = None


def _same(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y)
                                    for x, y in zip(a, b))


def check(op, build, params, step=STEP, tolerance=TOLERANCE, max_entries=None, rng=None):
    """Compare backward() against central differences for every entry of ``params``."""
    for t in params.values():
        t.data = np.ascontiguousarray(t.data, dtype=np.float64)
        t.grad = None
    backward(build())
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in params.items()}
    _, base = _eval(build)
    worst, worst_param, checked, skipped = 0.0, "", 0, 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        ad = analytic[name].reshape(-1)
        for e in entries:
            orig = flat[e]
            flat[e] = orig + step
            fp, bp = _eval(build)
            flat[e] = orig - step
            fm, bm = _eval(build)
            flat[e] = orig
            if not (_same(bp, base) and _same(bm, base)):
                skipped += 1
                continue
            fd = (fp - fm) / (2 * step)
            err = abs(ad[e] - fd) / (abs(fd) + 1e-8)
            checked += 1
            if err > worst:
                worst, worst_param = err, f"{name}[{int(e)}]"
    return CheckResult(op, worst, worst_param, checked, skipped, tolerance)


# ---------------------------------------------------------------------------
# cases


def _p(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _loss_of(fn, rng):
    """Wrap ``fn`` so every evaluation uses the same output weighting."""
    cache = {}

    def build():
        out = fn()
        if "r" not in cache:
            cache["r"] = Tensor(rng.normal(size=out.shape))
        return T.total(T.mul(out, cache["r"]))
    return build


def _graph(rng, n, k):
    return graph.knn_spatial(rng.normal(size=(n, 3)), k).idx


def _elementwise_cases(rng):
    a, b, c = _p(rng, 3, 4), _p(rng, 3, 4), _p(rng, 4)
    yield "add", _loss_of(lambda: T.add(a, c), rng), {"a": a, "b": c}
    yield "sub", _loss_of(lambda: T.sub(a, b), rng), {"a": a, "b": b}
    yield "mul", _loss_of(lambda: T.mul(a, c), rng), {"a": a, "b": c}
    m1, m2 = _p(rng, 3, 4), _p(rng, 4, 2)
    yield "matmul", _loss_of(lambda: T.matmul(m1, m2), rng), {"a": m1, "b": m2}
    x = _p(rng, 2, 3, 4)
    yield "reshape", _loss_of(lambda: T.reshape(x, (6, 4)), rng), {"x": x}
    yield "total", _loss_of(lambda: T.total(x, axis=1), rng), {"x": x}
    yield "mean", _loss_of(lambda: T.mean(x, axis=2), rng), {"x": x}
    u, v = _p(rng, 2, 3), _p(rng, 2, 5)
    yield "concat", _loss_of(lambda: T.concat([u, v], axis=1), rng), {"a": u, "b": v}
    y = _p(rng, 5, 4)
    yield "leaky_relu", _loss_of(lambda: T.leaky_relu(y, 0.2), rng), {"x": y}
    yield "dropout", _loss_of(lambda: T.dropout(y, 0.5, np.random.default_rng(3)), rng), {"x": y}
    s = _p(rng, 4, 5)
    yield "softmax", _loss_of(lambda: T.softmax(s, axis=1), rng), {"x": s}
    yield "log_softmax", _loss_of(lambda: T.log_softmax(s, axis=0), rng), {"x": s}
    labels = rng.integers(0, 5, 4)
    from adaptconv.train import cross_entropy
    yield "cross_entropy", lambda: cross_entropy(s, labels), {"logits": s}


def _graph_op_cases(rng):
    n, k, d, m = 10, 4, 3, 5
    idx = _graph(rng, n, k)
    x, w, b = _p(rng, n, d), _p(rng, d, m), _p(rng, m)
    yield "affine", _loss_of(lambda: T.affine(x, w, b), rng), {"x": x, "w": w, "b": b}
    w2 = _p(rng, 2 * d, m)
    yield ("edge_affine", _loss_of(lambda: T.edge_affine(x, idx, w2, b), rng),
           {"values": x, "w": w2, "b": b})
    yield "gather_rows", _loss_of(lambda: T.gather_rows(x, idx), rng), {"x": x}
    kern, geo = _p(rng, n, k, m, 6), _p(rng, n, k, 6)
    yield ("edge_inner_product", _loss_of(lambda: T.edge_inner_product(kern, geo), rng),
           {"kernel": kern, "geometry": geo})
    e = _p(rng, n, k, m)
    yield "reduce_max", _loss_of(lambda: T.reduce_max_axis(e, axis=1)[0], rng), {"x": e}
    yield "delta_pairs", _loss_of(lambda: conv.delta_pairs(x, idx), rng), {"values": x}
    bn = T.BatchNorm(m)
    bn.scale.data = rng.normal(size=m)
    bn.shift.data = rng.normal(size=m)
    z = _p(rng, n, k, m)
    yield ("batch_norm[train]", _loss_of(lambda: T.batch_norm(z, bn, "train"), rng),
           {"x": z, "scale": bn.scale, "shift": bn.shift})
    bn.running_mean.data = rng.normal(size=m)
    bn.running_var.data = rng.uniform(0.5, 2.0, m)
    yield ("batch_norm[eval]", _loss_of(lambda: T.batch_norm(z, bn, "eval"), rng),
           {"x": z, "scale": bn.scale, "shift": bn.shift})
    sampled = graph.farthest_point_sample(rng.normal(size=(n, 3)), 4)
    pts = rng.normal(size=(n, 3))
    yield ("pool_max", _loss_of(lambda: graph.pool_max(x, pts, sampled, 3)[0], rng), {"x": x})
    sub = _p(rng, 4, d)
    yield ("nearest_upsample",
           _loss_of(lambda: graph.nearest_upsample(sub, pts[sampled], pts), rng),
           {"features": sub})


def _layer_params(layer):
    return {name: t for name, t in layer.named_tensors() if t.requires_grad}


def _layer_cases(rng):
    n, k, d, m = 10, 4, 3, 4
    pos = rng.normal(size=(n, 3))
    normals = rng.normal(size=(n, 3))
    idx = graph.knn_spatial(pos, k).idx
    cloud = graph.PointCloud(pos, normals)
    for variant in conv.VARIANTS:
        x = _p(rng, n, d)
        layer = conv.AdaptConvLayer(d, m, variant, hidden=6, rng=rng)
        params = {"features": x, **_layer_params(layer)}
        fn = _loss_of(lambda x=x, layer=layer, variant=variant: conv.adaptconv_forward(
            cloud, x, graph.NeighborGraph(k, idx), layer, variant, training=True), rng)
        yield f"adaptconv[{variant}]", fn, params
    x = _p(rng, n, d)
    layer = conv.AdaptConvLayer(d, m, conv.SPATIAL, hidden=6, rng=rng)
    yield ("adaptive_kernel", _loss_of(lambda: layer.kernels(conv.delta_pairs(x, idx)), rng),
           {"features": x, **{k_: v for k_, v in _layer_params(layer).items()
                              if not k_.startswith("norm")}})
    geo = _p(rng, n, k, 6)
    yield ("adaptive_edge_response",
           _loss_of(lambda: conv.adaptive_edge_response(x, idx, geo, layer), rng),
           {"features": x, "geometry": geo,
            **{k_: v for k_, v in _layer_params(layer).items() if not k_.startswith("norm")}})
    gl = conv.GraphConvLayer(d, m, rng=rng)
    yield ("graphconv",
           _loss_of(lambda: conv.graphconv_forward(x, graph.NeighborGraph(k, idx), gl, True), rng),
           {"features": x, **_layer_params(gl)})
    for mode in ("point", "channel"):
        al = conv.AttentionLayer(d, m, mode, rng=rng)
        yield (f"attention[{mode}]",
               _loss_of(lambda al=al: conv.attention_forward(
                   x, graph.NeighborGraph(k, idx), al, True), rng),
               {"features": x, **_layer_params(al)})
    # no-norm path exercises the conv biases
    for kind in ("adapt", "graph"):
        lay = conv.make_layer(kind, d, m, conv.SPATIAL, hidden=6, norm=False, rng=rng)
        yield (f"{'adaptconv' if kind == 'adapt' else 'graphconv'}[norm off]",
               _loss_of(lambda lay=lay: lay(x, idx, pos, True), rng),
               {"features": x, **_layer_params(lay)})


def _net_cases(rng):
    # three clouds: batch norm over two rows maps every channel to +-1
    pts = [rng.normal(size=(16, 3)) for _ in range(3)]
    nrm = [rng.normal(size=(16, 3)) for _ in range(3)]
    # norm off: with batch statistics the aggregation shift is exactly cancelled
    # by the head's normalisation, a true zero gradient that only shows FD noise
    cfg = RunConfig(task="cls", k=4, widths=[4, 4], kernel_hidden=6, agg_width=8,
                    head_widths=[6], dropout=0.0, norm=False)
    net = ClassificationNet(cfg, 3, rng=np.random.default_rng(1))
    clouds = [graph.PointCloud(p) for p in pts]
    yield ("classification_net", _loss_of(lambda: net.forward(clouds, training=True), rng),
           _layer_params(net))
    scfg = RunConfig(task="seg", k=3, widths=[4, 4, 4], kernel_hidden=6, pool_after=[0],
                     pool_rate=2, decoder_widths=[6])
    snet = SegmentationNet(scfg, 3, 2, in_width=6, rng=np.random.default_rng(2))
    sclouds = [graph.PointCloud(p, n, category=i % 2, num_categories=2)
               for i, (p, n) in enumerate(zip(pts, nrm))]
    yield ("segmentation_net", _loss_of(lambda: snet.forward(sclouds, training=True), rng),
           _layer_params(snet))


def cases(seed=0):
    rng = np.random.default_rng(seed)
    yield from _elementwise_cases(rng)
    yield from _graph_op_cases(rng)
    yield from _layer_cases(rng)
    yield from _net_cases(rng)


def corrupt(op, factor=1.01):
    """Fault map scaling every gradient ``op`` emits by ``factor``."""
    return {op: lambda grads: tuple(None if g is None else g * factor for g in grads)}


def run_suite(seed=0, faults=None, max_entries=40, step=STEP, tolerance=TOLERANCE):
    """Check every case; ``faults`` (see :func:`corrupt`) is active during the run."""
    T._faults = dict(faults or {})
    sample_rng = np.random.default_rng(seed + 1)
    try:
        return [check(op, build, params, step, tolerance, max_entries, sample_rng)
                for op, build, params in cases(seed)]
    finally:
        T._faults = {}


def format_report(results, elapsed=None):
    width = max(len(r.op) for r in results)
    lines = [f"{'op':<{width}}  {'worst rel err':>13}  {'checked':>7}  {'skipped':>7}  status"]
    for r in results:
        status = "ok" if r.passed else f"FAIL at {r.param or '-'}"
        lines.append(f"{r.op:<{width}}  {r.worst:13.3e}  {r.checked:7d}  {r.skipped:7d}  {status}")
    failed = [r for r in results if not r.passed]
    tail = f"{len(results) - len(failed)}/{len(results)} passed (tolerance {TOLERANCE:g})"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    lines.append(tail)
    return "\n".join(lines) + "\n"


def main_report(seed=0, faults=None):
    start = time.perf_counter()
    results = run_suite(seed, faults)
    return results, format_report(results, time.perf_counter() - start)
