"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every numeric computation in the package runs through the primitives in this
module.  A Tensor produced by a primitive keeps references to its inputs and
a backward closure; `backward()` linearizes that graph into a ComputationTape
(creation order is a valid topological order for a dynamic graph) and sweeps
it once in reverse.  Graphs are rebuilt every step, which is what the
training loop needs since subgraphs are resampled per epoch.

Hot index kernels (gather/scatter/segment ops) are delegated to `_kernels`,
which carries numba implementations with a numpy fallback.
"""

import os
import struct

import numpy as np
from scipy.special import erf

from . import _kernels

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# When enabled, every primitive asserts its output is finite.  Costs ~10% on
# large graphs, so tests flip it on and training leaves it off.
DEBUG_CHECK_FINITE = os.environ.get("MULTEHR_DEBUG", "0") == "1"


def set_debug(flag):
    global DEBUG_CHECK_FINITE
    DEBUG_CHECK_FINITE = bool(flag)


class ShapeMismatchError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """A dense float64 array plus optional gradient buffer.

    Data is immutable by convention once created by a primitive; only
    optimizer steps write `.data` in place (between tapes).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self.backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Constant view on the same buffer; cuts the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar; all routing goes through the module-level primitives.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _wrap(-1.0))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward_fn):
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.requires_grad = requires
    if requires:
        out.op = op
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.op = op
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from primitive '{op}'")
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to `shape` by summing expanded axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data / b.data, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(f"matmul needs ndim>=2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, "matmul", (a, b), backward)


def tsum(x, axis=None, keepdims=False):
    x = _wrap(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), backward)


def tmean(x, axis=None, keepdims=False):
    x = _wrap(x)
    n = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, x.data.shape).copy(),)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), "mean", (x,), backward)


def variance(x):
    """Population variance over all elements."""
    x = _wrap(x)
    n = x.data.size
    mu = x.data.mean()
    out = ((x.data - mu) ** 2).mean()
    return _make(out, "variance", (x,),
                 lambda g: (g * 2.0 * (x.data - mu) / n,))


def exp(x):
    x = _wrap(x)
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x):
    x = _wrap(x)
    if np.any(x.data < 0):
        raise DomainError("log of negative input")
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sigmoid(x):
    x = _wrap(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(x, slope=0.01):
    x = _wrap(x)
    out = np.where(x.data >= 0, x.data, slope * x.data)
    return _make(out, "leaky_relu", (x,),
                 lambda g: (g * np.where(x.data >= 0, 1.0, slope),))


def gelu(x):
    """Exact erf-form GELU."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, "gelu", (x,), backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 "concat", tensors, backward)


def slice_axis(x, axis, start, stop):
    x = _wrap(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(x.data[idx].copy(), "slice", (x,), backward)


def reshape(x, shape):
    x = _wrap(x)
    return _make(x.data.reshape(shape), "reshape", (x,),
                 lambda g: (g.reshape(x.data.shape),))


def transpose(x, axes):
    x = _wrap(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), "transpose", (x,),
                 lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# row indexing primitives (hot path)


def gather_rows(x, idx):
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    return _make(x.data[idx], "gather_rows", (x,),
                 lambda g: (_kernels.scatter_add_rows(g, idx, x.data.shape[0]),))


def scatter_add_rows(x, idx, n_rows):
    """out[i] = sum of rows j of x with idx[j] == i; x is (m, k)."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"scatter_add_rows needs a 2-D input, got {x.data.shape}")
    if idx.shape[0] != x.data.shape[0]:
        raise ShapeMismatchError(
            f"scatter_add_rows index length {idx.shape[0]} != rows {x.data.shape[0]}")
    return _make(_kernels.scatter_add_rows(x.data, idx, n_rows),
                 "scatter_add_rows", (x,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# composite-math primitives


def l2_norm(x, axis=None):
    """Euclidean norm, optionally per-row; subgradient 0 at the origin."""
    x = _wrap(x)
    out = np.sqrt((x.data ** 2).sum(axis=axis))

    def backward(g):
        denom = np.maximum(out, 1e-300)
        if axis is None:
            return (g * x.data / denom,)
        gg = np.expand_dims(g / denom, axis)
        return (gg * x.data,)

    return _make(out, "l2_norm", (x,), backward)


def softmax(x, temperature=1.0, axis=-1):
    """softmax(x / temperature) along `axis`, log-sum-exp shifted."""
    x = _wrap(x)
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot) / temperature,)

    return _make(p, "softmax", (x,), backward)


def dropout(x, p, rng, training=True):
    """Inverted dropout: scales kept units by 1/(1-p) so eval needs no rescale."""
    x = _wrap(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate must be in [0,1), got {p}")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


def relu(x):
    return leaky_relu(x, slope=0.0)


def clip_min(x, floor):
    """max(x, floor) elementwise; gradient passes only where x >= floor."""
    x = _wrap(x)
    keep = x.data >= floor
    return _make(np.where(keep, x.data, floor), "clip_min", (x,),
                 lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# tape and backward


class ComputationTape:
    """Reverse-topological linearization of the graph reaching `root`.

    records are (output tensor, parents) in forward topological order; a
    backward sweep visits each exactly once.
    """

    def __init__(self, records):
        self.records = records

    @classmethod
    def trace(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return cls([t for t in order if t.backward_fn is not None])


def backward(root):
    """Fill `.grad` on every requires_grad leaf reachable from scalar `root`."""
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    tape = ComputationTape.trace(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.backward_fn is None:
                # leaf: accumulate into the persistent buffer
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                key = id(parent)
                if key in grads:
                    # out-of-place: pg may alias a buffer still pending
                    # for a sibling parent
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    # root may itself be a leaf
    if root.backward_fn is None and root.requires_grad:
        if root.grad is None:
            root.grad = np.zeros_like(root.data)
        root.grad += np.ones_like(root.data)


def finite_diff_check(f, x, eps=1e-3):
    """Max relative error between the analytic gradient of scalar f and a
    central difference, over all coordinates of x.  f must be deterministic."""
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(x0.shape))).item()
        lo = f(Tensor((flat - bump).reshape(x0.shape))).item()
        central = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        if err > worst:
            worst = err
    return worst


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam moment buffers for a named parameter dict, plus hyperparameters.

    Weight decay is decoupled: applied as lr*wd*param alongside the moment
    update.  Parameters that received no gradient this step are untouched
    (no decay either), which keeps inactive task heads frozen.
    """

    def __init__(self, learning_rate=5e-5, weight_decay=1e-5,
                 beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, state):
    """One Adam update over `params` (dict name -> Tensor), in place.

    Reads `.grad`, clears it afterwards.  Raises on moment/param shape
    mismatch (e.g. a parameter was swapped for a different shape).
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.data.shape} for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ContractError(f"Adam moment shape {m.shape} != param shape {p.data.shape} for '{name}'")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= state.learning_rate * update
        p.grad = None


def zero_grads(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint serialization

_MAGIC = b"MTEHR1"
_VERSION = 1


def save_checkpoint(path, named_tensors):
    """Flat binary checkpoint: magic, version, then per-tensor records of
    (u32 name length, utf-8 name, u32 rank, u64 dims, little-endian f64 data)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name in sorted(named_tensors):
            arr = named_tensors[name]
            data = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into a dict of name -> float64 ndarray."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ContractError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            buf = fh.read(8 * count)
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).astype(np.float64)
    return out
