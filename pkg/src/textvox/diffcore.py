"""Minimal reverse-mode differentiation engine on numpy arrays.

Every operation's backward rule is written in terms of the engine's own
ops, so cotangents are graph nodes too and gradients of gradients (needed
for the critic's gradient penalty) come out exact. Arrays are float32 for
training and float64 in gradient tests; the engine follows input dtypes.
"""

import json

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class NonFiniteGradientError(RuntimeError):
    """Raised by the optimizer when a gradient contains nan/inf."""


class Node:
    """A value in the computation graph plus backward wiring.

    parents is a tuple of (parent_node, vjp) pairs where vjp maps the
    cotangent of this node to a cotangent contribution for the parent.
    """

    __slots__ = ("value", "parents")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"


def constant(x):
    return Node(x)


def _lift(x):
    return x if isinstance(x, Node) else Node(x)


def detach(x):
    return Node(x.value) if isinstance(x, Node) else Node(x)


def _check_same_shape(a, b, op):
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def _unbroadcast(cot, shape):
    # Sum a broadcasted cotangent back down to the original shape.
    extra = cot.value.ndim - len(shape)
    if extra > 0:
        cot = sum_(cot, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and cot.value.shape[i] != 1)
    if axes:
        cot = sum_(cot, axis=axes, keepdims=True)
    if cot.value.shape != tuple(shape):
        cot = reshape(cot, shape)
    return cot


# ---------------------------------------------------------------------------
# Arithmetic primitives.

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = a.value + b.value
    return Node(out, (
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ))


def neg(a):
    a = _lift(a)
    return Node(-a.value, ((a, lambda g: neg(g)),))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.value * b.value
    return Node(out, (
        (a, lambda g: _unbroadcast(mul(g, b), a.value.shape)),
        (b, lambda g: _unbroadcast(mul(g, a), b.value.shape)),
    ))


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = a.value / b.value
    return Node(out, (
        (a, lambda g: _unbroadcast(div(g, b), a.value.shape)),
        (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.value.shape)),
    ))


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-d operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value
    return Node(out, (
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ))


def power(a, p):
    a = _lift(a)
    p = float(p)
    out = a.value ** p
    return Node(out, ((a, lambda g: mul(g, mul(constant(p), power(a, p - 1.0)))),))


def exp(a):
    a = _lift(a)
    node = Node(np.exp(a.value))
    node.parents = ((a, lambda g: mul(g, node)),)
    return node


def log(a):
    a = _lift(a)
    return Node(np.log(a.value), ((a, lambda g: div(g, a)),))


def tanh(a):
    a = _lift(a)
    node = Node(np.tanh(a.value))
    node.parents = ((a, lambda g: mul(g, add(1.0, neg(mul(node, node))))),)
    return node


def sigmoid(a):
    a = _lift(a)
    val = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.value))),
                   np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))
    node = Node(val)
    node.parents = ((a, lambda g: mul(g, mul(node, add(1.0, neg(node))))),)
    return node


def relu(a):
    a = _lift(a)
    mask = (a.value > 0).astype(a.value.dtype)
    return Node(a.value * mask, ((a, lambda g: mul(g, constant(mask))),))


def leaky_relu(a, alpha=0.2):
    a = _lift(a)
    slope = np.where(a.value > 0, 1.0, alpha).astype(a.value.dtype)
    return Node(a.value * slope, ((a, lambda g: mul(g, constant(slope))),))


def clip_min(a, low):
    """max(a, low) elementwise; gradient is passed only where a > low."""
    a = _lift(a)
    mask = (a.value > low).astype(a.value.dtype)
    return Node(np.maximum(a.value, low), ((a, lambda g: mul(g, constant(mask))),))


# ---------------------------------------------------------------------------
# Shape-manipulating primitives.

def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return broadcast_to(reshape(g, (1,) * a.value.ndim), a.value.shape)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            kshape = list(a.value.shape)
            for ax in axes:
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return broadcast_to(g, a.value.shape)

    return Node(out, ((a, vjp),))


def mean_(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.value.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape):
    a = _lift(a)
    out = np.broadcast_to(a.value, shape)
    return Node(np.array(out), ((a, lambda g: _unbroadcast(g, a.value.shape)),))


def reshape(a, shape):
    a = _lift(a)
    return Node(a.value.reshape(shape), ((a, lambda g: reshape(g, a.value.shape)),))


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = tuple(np.argsort(axes))
    return Node(np.transpose(a.value, axes), ((a, lambda g: transpose(g, inv)),))


def concat(parts, axis=0):
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pairs = []
    for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
        key = tuple(slice(None) for _ in range(axis)) + (slice(int(start), int(stop)),)
        pairs.append((p, lambda g, key=key: slice_(g, key)))
    return Node(out, tuple(pairs))


def slice_(a, key):
    a = _lift(a)
    return Node(a.value[key], ((a, lambda g: unslice(g, a.value.shape, key)),))


def unslice(a, shape, key):
    """Embed `a` into a zero array of `shape` at `key` (adjoint of slice_)."""
    a = _lift(a)
    out = np.zeros(shape, dtype=a.value.dtype)
    out[key] = a.value
    return Node(out, ((a, lambda g: slice_(g, key)),))


def gather_rows(table, idx):
    table = _lift(table)
    idx = np.asarray(idx)
    n = table.value.shape[0]
    return Node(table.value[idx], ((table, lambda g: scatter_rows(g, idx, n)),))


def scatter_rows(a, idx, n_rows):
    """Sum rows of `a` into a zero (n_rows, ...) array at `idx` positions."""
    a = _lift(a)
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + a.value.shape[len(idx.shape):], dtype=a.value.dtype)
    np.add.at(out, idx, a.value)
    return Node(out, ((a, lambda g: gather_rows(g, idx)),))


def flip(a, axes):
    a = _lift(a)
    return Node(np.flip(a.value, axes), ((a, lambda g: flip(g, axes)),))


def pad_spatial(a, pad, axes=(2, 3, 4)):
    a = _lift(a)
    widths = [(0, 0)] * a.value.ndim
    for ax in axes:
        widths[ax] = (pad, pad)
    out = np.pad(a.value, widths)
    key = tuple(
        slice(pad, a.value.shape[ax] + pad) if ax in axes else slice(None)
        for ax in range(a.value.ndim)
    )
    return Node(out, ((a, lambda g: slice_(g, key)),))


def upsample_zeros(a, stride, axes=(2, 3, 4)):
    """Insert stride-1 zeros between entries along the given axes."""
    a = _lift(a)
    if stride == 1:
        return a
    shape = list(a.value.shape)
    key = [slice(None)] * a.value.ndim
    for ax in axes:
        shape[ax] = stride * (shape[ax] - 1) + 1
        key[ax] = slice(None, None, stride)
    key = tuple(key)
    out = np.zeros(shape, dtype=a.value.dtype)
    out[key] = a.value
    return Node(out, ((a, lambda g: slice_(g, key)),))


# ---------------------------------------------------------------------------
# Convolution. Layout: inputs (B, C, X, Y, Z), weights (O, C, k, k, k).
# Geometry must be exact: (X + 2*pad - k) divisible by stride.

def _conv3d_value(x, w, stride):
    from numpy.lib.stride_tricks import sliding_window_view

    k = w.shape[2:5]
    win = sliding_window_view(x, k, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, 4, 1))


def conv3d(x, w, stride=1, pad=0):
    x, w = _lift(x), _lift(w)
    b, c, *spatial = x.value.shape
    o, cw, *k = w.value.shape
    if c != cw:
        raise ShapeMismatchError(f"conv3d: input channels {c} != weight channels {cw}")
    for n, kk in zip(spatial, k):
        if (n + 2 * pad - kk) % stride != 0 or n + 2 * pad < kk:
            raise ShapeMismatchError(
                f"conv3d: inexact geometry, input {spatial}, kernel {k}, stride {stride}, pad {pad}"
            )
        if pad >= kk:
            raise ShapeMismatchError(f"conv3d: pad {pad} must be < kernel {kk}")
    xp = x if pad == 0 else pad_spatial(x, pad)
    out = _conv3d_value(xp.value, w.value, stride)

    def vjp_x(g):
        gu = upsample_zeros(g, stride)
        gp = pad_spatial(gu, k[0] - 1 - pad)
        wt = transpose(flip(w, (2, 3, 4)), (1, 0, 2, 3, 4))
        return conv3d(gp, wt, stride=1, pad=0)

    def vjp_w(g):
        a = transpose(xp, (1, 0, 2, 3, 4))
        gw = transpose(upsample_zeros(g, stride), (1, 0, 2, 3, 4))
        return transpose(conv3d(a, gw, stride=1, pad=0), (1, 0, 2, 3, 4))

    return Node(out, ((x, vjp_x), (w, vjp_w)))


def conv3d_transpose(x, w, stride=2, pad=1):
    """Fractionally-strided conv: upsample with zeros, then convolve.

    Output spatial size is stride*(n-1) + k - 2*pad, which doubles the grid
    for kernel 4, stride 2, pad 1. Weights are (O, C, k, k, k) like conv3d.
    """
    x, w = _lift(x), _lift(w)
    k = w.value.shape[2]
    up = upsample_zeros(x, stride)
    return conv3d(pad_spatial(up, k - 1 - pad), flip(w, (2, 3, 4)), stride=1, pad=0)


def avg_pool3d(x):
    """Global average pool over the spatial axes: (B, C, X, Y, Z) -> (B, C)."""
    return mean_(x, axis=(2, 3, 4))


# ---------------------------------------------------------------------------
# Composites used by the models.

def softmax_rows(a):
    """Row-wise softmax of a 2-d array, stabilized by the detached row max."""
    a = _lift(a)
    shift = a.value.max(axis=1, keepdims=True)
    e = exp(add(a, constant(-shift)))
    return div(e, sum_(e, axis=1, keepdims=True))


def logsumexp_rows(a):
    a = _lift(a)
    shift = a.value.max(axis=1, keepdims=True)
    e = exp(add(a, constant(-shift)))
    return add(log(sum_(e, axis=1)), constant(shift[:, 0]))


def l2_norm_rows(a):
    # The tiny floor keeps the gradient finite at all-zero rows without
    # perturbing norms of practical magnitude.
    return power(add(sum_(mul(a, a), axis=1), 1e-24), 0.5)


class BatchNormState:
    """Running statistics for one batch_norm site."""

    def __init__(self, width):
        self.mean = np.zeros(width, dtype=np.float32)
        self.var = np.ones(width, dtype=np.float32)


def batch_norm(x, gamma, beta, state, training, momentum=0.9, eps=1e-5):
    """Normalize over all axes except channel axis 1.

    In training mode uses batch statistics and updates the running state
    in place; in eval mode uses the stored running statistics.
    """
    x = _lift(x)
    axes = tuple(i for i in range(x.value.ndim) if i != 1)
    cshape = tuple(1 if i != 1 else x.value.shape[1] for i in range(x.value.ndim))
    if training:
        mu = mean_(x, axis=axes, keepdims=True)
        xc = add(x, neg(mu))
        var = mean_(mul(xc, xc), axis=axes, keepdims=True)
        state.mean = momentum * state.mean + (1 - momentum) * mu.value.reshape(-1)
        state.var = momentum * state.var + (1 - momentum) * var.value.reshape(-1)
        y = mul(xc, power(add(var, eps), -0.5))
    else:
        mu = constant(state.mean.reshape(cshape).astype(x.value.dtype))
        inv = constant((1.0 / np.sqrt(state.var + eps)).reshape(cshape).astype(x.value.dtype))
        y = mul(add(x, neg(mu)), inv)
    return add(mul(y, reshape(gamma, cshape)), reshape(beta, cshape))


def gru_cell(x, h, p):
    """One GRU step. p maps names wz,uz,bz,wr,ur,br,wh,uh,bh to nodes."""
    z = sigmoid(add(add(matmul(x, p["wz"]), matmul(h, p["uz"])), p["bz"]))
    r = sigmoid(add(add(matmul(x, p["wr"]), matmul(h, p["ur"])), p["br"]))
    cand = tanh(add(add(matmul(x, p["wh"]), matmul(mul(r, h), p["uh"])), p["bh"]))
    return add(mul(add(1.0, neg(z)), h), mul(z, cand))


# ---------------------------------------------------------------------------
# Backward pass.

def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output, wrt, seed=None):
    """Cotangents of `output` w.r.t. each node in `wrt`.

    Returns Nodes, so the results can be differentiated again. `seed`
    overrides the default all-ones output cotangent.
    """
    if seed is None:
        seed = constant(np.ones_like(output.value))
    keep = {id(w) for w in wrt}
    cots = {id(output): seed}
    for node in reversed(_topo_order(output)):
        g = cots.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = cots.get(id(parent))
            cots[id(parent)] = contrib if prev is None else add(prev, contrib)
        if id(node) not in keep:
            del cots[id(node)]
    return [cots.get(id(w), constant(np.zeros_like(w.value))) for w in wrt]


def gradients(output, wrt, seed=None):
    """Like backward() but returns plain numpy arrays."""
    return [g.value for g in backward(output, wrt, seed=seed)]


# ---------------------------------------------------------------------------
# Parameters, initialization, optimizer, checkpoints.

class Parameters:
    """Ordered name -> array table with unique names."""

    def __init__(self):
        self._arrays = {}

    def add(self, name, array):
        if name in self._arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.asarray(array)
        return self._arrays[name]

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, array):
        if name not in self._arrays:
            raise KeyError(name)
        self._arrays[name] = array

    def __contains__(self, name):
        return name in self._arrays

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def astype(self, dtype):
        for name in self._arrays:
            self._arrays[name] = self._arrays[name].astype(dtype)

    def total_size(self):
        return sum(a.size for a in self._arrays.values())


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Adam:
    """Adam with an optional staircase exponential learning-rate decay."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_rate=None, decay_every=10000):
        self.params = params
        self.lr0 = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decay_rate = decay_rate
        self.decay_every = decay_every
        self.t = 0
        self.m = {n: np.zeros_like(a) for n, a in params.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.items()}

    def lr_at(self, step):
        if self.decay_rate is None:
            return self.lr0
        return self.lr0 * self.decay_rate ** (step // self.decay_every)

    def step(self, grads):
        """Apply one update. grads maps parameter name -> gradient array."""
        bad = [n for n, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise NonFiniteGradientError(f"non-finite gradient for parameters: {sorted(bad)}")
        self.t += 1
        lr = self.lr_at(self.t)
        b1, b2 = self.beta1, self.beta2
        corr = lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p = self.params[name]
            self.params[name] = (p - corr * m / (np.sqrt(v) + self.eps)).astype(p.dtype, copy=False)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        for name in self.m:
            self.m[name] = np.array(arrays[f"adam.m.{name}"])
            self.v[name] = np.array(arrays[f"adam.v.{name}"])


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON header, raw little-endian data.

CKPT_MAGIC = b"T2CK"
CKPT_VERSION = 1


def save_checkpoint(path, arrays, meta=None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        blob = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(a.shape),
            "dtype": a.dtype.str if a.dtype.byteorder != ">" else a.dtype.newbyteorder("<").str,
            "offset": offset,
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(int(CKPT_VERSION).to_bytes(2, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = int.from_bytes(raw[4:6], "little")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hlen = int.from_bytes(raw[6:14], "little")
    header = json.loads(raw[14:14 + hlen])
    base = 14 + hlen
    arrays = {}
    for ent in header["entries"]:
        dtype = np.dtype(ent["dtype"])
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = base + ent["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        arrays[ent["name"]] = np.array(arr.reshape(ent["shape"]))
    return arrays, header["meta"]


# ---------------------------------------------------------------------------
# Finite-difference utility shared by the gradient-check tests.

def finite_difference(f, arrays, h=1e-5):
    """Central finite-difference gradients of scalar f w.r.t. each array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*arrays))
            flat[i] = orig - h
            fm = float(f(*arrays))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)
