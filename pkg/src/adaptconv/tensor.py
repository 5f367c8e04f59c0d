"""A small define-by-run reverse-mode autodiff engine in double precision.

Only the operations the point-cloud networks need are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure
computing the vector-Jacobian product; :func:`backward` replays those
closures in reverse topological order.
"""
import struct
from collections import OrderedDict

import numpy as np

from adaptconv import kernels


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


# Instrumentation for the gradient checker. ``_branches`` collects every
# piecewise branch decision (LeakyReLU signs, max positions, kNN lists) while
# a check is recording; ``_faults`` maps an op name to a function applied to
# that op's backward output, used to prove the checker catches bad gradients.
_branches = None
_faults = {}


def note_branch(pattern):
    if _branches is not None:
        _branches.append(np.array(pattern, copy=True))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # leaves own a private copy; intermediate grads are never mutated
        g = np.asarray(g).reshape(t.shape)
        t.grad = g.copy() if t._backward is None else g
    else:
        t.grad = t.grad + g


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Calling twice without zeroing gradients adds the second pass on top of
    the first.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _accumulate(node, g)
        if node._backward is None:
            continue
        pgs = node._backward(g)
        if _faults and node.op in _faults:
            pgs = _faults[node.op](pgs)
        for parent, pg in zip(node._parents, pgs):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def total(x, axis=None):
    """Sum over ``axis`` (all entries when None)."""
    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)
    return _node(np.sum(x.data, axis=axis), (x,), bw, "sum")


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)
    return _node(out, (x,), bw, "mean")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def leaky_relu(x, slope=0.2):
    """x for x >= 0, slope * x otherwise (the kink at 0 takes slope 1)."""
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    note_branch(x.data >= 0.0)
    scale = np.where(x.data >= 0.0, 1.0, slope)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def dropout(x, rate, rng):
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x, w, b=None):
    """x @ w + b over the last axis of x; leading axes are flattened."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)
    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw, "affine")


def edge_affine(values, idx, w, b=None):
    """affine([v_i, v_j - v_i], w, b) for every edge (i = idx[r, 0], j = idx[r, q]).

    Evaluated per point as v @ (w_top - w_bot) and v @ w_bot, then gathered
    onto the edges, which is k times cheaper than building the edge inputs.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n, d = values.shape
    if w.shape[0] != 2 * d:
        raise DimensionError(f"edge_affine: values {values.shape} do not match weight {w.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"edge_affine: index outside [0, {n})")
    top, bot = w.data[:d], w.data[d:]
    diff = top - bot
    p = values.data @ diff
    q = values.data @ bot
    centres = idx[:, 0]
    out = p[centres][:, None, :] + q[idx]
    if b is not None:
        out += b.data

    def bw(g):
        o = w.shape[1]
        gp = kernels.scatter_add_rows(centres, g.sum(axis=1), n)
        gq = kernels.scatter_add_rows(idx.ravel(), g.reshape(-1, o), n)
        gv = gp @ diff.T + gq @ bot.T if values.requires_grad else None
        gw = None
        if w.requires_grad:
            gtop = values.data.T @ gp
            gw = np.concatenate([gtop, values.data.T @ gq - gtop], axis=0)
        if b is None:
            return gv, gw
        return gv, gw, (g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None)
    parents = (values, w) if b is None else (values, w, b)
    return _node(out, parents, bw, "edge_affine")


def gather_rows(x, idx):
    """out[..., :] = x[idx[...]]; the backward pass scatter-adds into x."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index outside [0, {n})")
    out = x.data[idx]

    def bw(g):
        w = int(np.prod(x.shape[1:]))
        flat = kernels.scatter_add_rows(idx.ravel(), g.reshape(-1, w), n)
        return (flat.reshape(x.shape),)
    return _node(out, (x,), bw, "gather_rows")


def edge_inner_product(kernel, geometry):
    """out[..., m] = sum_c kernel[..., m, c] * geometry[..., c]."""
    if kernel.shape[-1] != geometry.shape[-1] or kernel.shape[:-2] != geometry.shape[:-1]:
        raise DimensionError(
            f"edge_inner_product: kernel {kernel.shape} vs geometry {geometry.shape}")
    kd, gd = kernel.data, geometry.data
    out = np.matmul(kd, gd[..., :, None])[..., 0]

    def bw(g):
        gk = g[..., :, None] * gd[..., None, :] if kernel.requires_grad else None
        gg = np.matmul(g[..., None, :], kd)[..., 0, :] if geometry.requires_grad else None
        return gk, gg
    return _node(out, (kernel, geometry), bw, "edge_inner_product")


# ---------------------------------------------------------------------------
# reductions and normalisation


def reduce_max_axis(x, axis=1):
    """Channel-wise max over ``axis``; returns (values, argmax).

    The gradient goes to the first maximal position only.
    """
    ax = axis % x.ndim
    k = x.shape[ax]
    if k < 1:
        raise DimensionError(f"reduce_max_axis: empty axis {axis} in shape {x.shape}")
    a = int(np.prod(x.shape[:ax]))
    b = int(np.prod(x.shape[ax + 1:]))
    vals, arg = kernels.neighbor_max(x.data.reshape(a, k, b))
    note_branch(arg)
    rest = x.shape[:ax] + x.shape[ax + 1:]

    def bw(g):
        gm = np.zeros((a, k, b))
        np.put_along_axis(gm, arg[:, None, :], g.reshape(a, 1, b), axis=1)
        return (gm.reshape(x.shape),)
    return _node(vals.reshape(rest), (x,), bw, "reduce_max"), arg.reshape(rest)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return _node(s, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return _node(out, (x,), bw, "log_softmax")


class BatchNorm:
    """Per-channel normalisation over every axis but the last.

    Training mode uses batch statistics (biased variance) and updates the
    running averages; eval mode uses the running averages.
    """

    def __init__(self, width, eps=1e-5, momentum=0.9, center=True):
        self.scale = Tensor(np.ones(width), requires_grad=True)
        # center=False freezes the shift at zero (for a layer whose shift is
        # cancelled downstream)
        self.shift = Tensor(np.zeros(width), requires_grad=center)
        self.running_mean = Tensor(np.zeros(width))
        self.running_var = Tensor(np.ones(width))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, training):
        return batch_norm(x, self, "train" if training else "eval")


def batch_norm(x, params, mode="train"):
    width = x.shape[-1]
    flat = x.data.reshape(-1, width)
    rows = flat.shape[0]
    eps = params.eps
    gamma, beta = params.scale, params.shift
    if mode == "train":
        if rows < 2:
            raise ConfigError(f"batch_norm in train mode needs at least 2 rows, got {rows}")
        mu = flat.mean(axis=0)
        xc = flat - mu
        var = (xc * xc).mean(axis=0)
        m = params.momentum
        params.running_mean.data = m * params.running_mean.data + (1 - m) * mu
        params.running_var.data = (m * params.running_var.data
                                   + (1 - m) * var * rows / (rows - 1))
    elif mode == "eval":
        mu, var = params.running_mean.data, params.running_var.data
        xc = flat - mu
    else:
        raise ConfigError(f"unknown batch_norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, width)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        if mode == "train":
            dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        else:
            dx = dxhat * inv
        return dx.reshape(x.shape), dgamma, dbeta
    return _node(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Base class: tensors and sub-modules assigned as attributes are registered
    in assignment order; lists of modules are walked element by element."""

    def named_tensors(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, (Module, BatchNorm)):
                yield from _named(value, path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, BatchNorm)):
                        yield from _named(item, f"{path}.{i}.")

    def parameters(self):
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def param_store(self):
        return ParamStore(self.named_tensors())


def _named(obj, prefix):
    if isinstance(obj, Module):
        yield from obj.named_tensors(prefix)
    else:
        for name in ("scale", "shift", "running_mean", "running_var"):
            yield prefix + name, getattr(obj, name)


_MAGIC = b"ACPS"
_VERSION = 1


class ParamStore(OrderedDict):
    """Ordered name -> Tensor map with a binary checkpoint format.

    File layout (all integers little-endian):

    ====================  =======================================
    4 bytes               magic ``ACPS``
    uint32                format version (1)
    uint32                record count
    per record:
      uint16              name length L
      L bytes             UTF-8 name
      uint8               trainable flag (1 = requires_grad)
      uint8               ndim
      ndim x uint64       extents
      prod(extents) x f8  values, row-major little-endian doubles
    ====================  =======================================
    """

    def __init__(self, items=()):
        super().__init__()
        for name, t in items:
            if name in self:
                raise ContractError(f"duplicate parameter name {name!r}")
            self[name] = t

    def count(self, trainable_only=True):
        return sum(t.data.size for t in self.values() if t.requires_grad or not trainable_only)

    def to_bytes(self):
        out = [_MAGIC, struct.pack("<II", _VERSION, len(self))]
        for name, t in self.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(struct.pack("<BB", int(t.requires_grad), t.data.ndim))
            out.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        if buf[:4] != _MAGIC:
            raise ContractError("not a parameter file (bad magic)")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != _VERSION:
            raise ContractError(f"unsupported parameter file version {version}")
        pos = 12
        items = []
        for _ in range(count):
            (length,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + length].decode("utf-8")
            pos += length
            trainable, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape))
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            items.append((name, Tensor(data.astype(np.float64), requires_grad=bool(trainable))))
        return cls(items)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def load_into(self, module):
        """Copy values into the same-named tensors of ``module``."""
        target = module.param_store()
        missing = set(target) - set(self)
        extra = set(self) - set(target)
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing {sorted(missing)}, "
                                f"unexpected {sorted(extra)}")
        for name, t in target.items():
            if t.shape != self[name].shape:
                raise DimensionError(f"{name}: checkpoint shape {self[name].shape} vs {t.shape}")
            t.data = self[name].data.copy()
