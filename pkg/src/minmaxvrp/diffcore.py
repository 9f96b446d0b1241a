"""Reverse-mode autodiff over dense 2-D arrays, plus an Adam optimizer.

Everything is a matrix: scalars are 1x1, vectors are 1xd. Ops record their
backward closure on the output tensor; ``backward`` on a scalar loss walks the
implicit graph in reverse topological order once. Parameters default to
float32; float64 is available (gradient checks run there, on the same code
paths). Reductions that feed route lengths and means accumulate in float64.
"""

import base64
import contextlib
import math
import threading

import numpy as np

DEFAULT_DTYPE = np.float32

# per-thread so concurrent rollouts toggle recording independently
_grad_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure numpy forward)."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def grad_enabled():
    return getattr(_grad_state, "enabled", True)


class Tensor:
    """A 2-D array node in the computation graph.

    fields: data (row-major ndarray), requires_grad, grad (same shape or
    None), plus the recorded parents and backward closure for non-leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"diffcore tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar shape {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def _make(data, parents, backward_fn):
    """Wrap an op result; record the closure only while grads are enabled."""
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# linear algebra ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g, out):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(a):
    out_data = np.ascontiguousarray(a.data.T)

    def backward(g, out):
        _accum(a, g.T)

    return _make(out_data, (a,), backward)


def add(a, b):
    """Elementwise sum; b may be a 1xd row broadcast over a's rows."""
    if a.shape == b.shape:
        out_data = a.data + b.data

        def backward(g, out):
            _accum(a, g)
            _accum(b, g)

    elif b.shape == (1, a.shape[1]):
        out_data = a.data + b.data

        def backward(g, out):
            _accum(a, g)
            _accum(b, g.sum(axis=0, keepdims=True))

    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _make(out_data, (a, b), backward)


def scale(a, c):
    """a * c with c a python float or a 1x1 tensor (trainable scalar)."""
    if isinstance(c, Tensor):
        if c.shape != (1, 1):
            raise ValueError(f"scale factor must be 1x1, got {c.shape}")
        out_data = a.data * c.data[0, 0]

        def backward(g, out):
            _accum(a, g * c.data[0, 0])
            _accum(c, np.array([[np.sum(g * a.data, dtype=np.float64)]], dtype=a.dtype))

        return _make(out_data, (a, c), backward)

    out_data = a.data * c

    def backward(g, out):
        _accum(a, g * c)

    return _make(out_data, (a,), backward)


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out_data = a.data * b.data

    def backward(g, out):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out_data, (a, b), backward)


def concat_rows(tensors):
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ValueError(f"concat_rows column mismatch: {[t.shape for t in tensors]}")
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g, out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[lo:hi])

    return _make(out_data, tuple(tensors), backward)


def concat_cols(tensors):
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch: {[t.shape for t in tensors]}")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g, out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[:, lo:hi])

    return _make(out_data, tuple(tensors), backward)


def mean_rows(a):
    """Column means -> 1xd. mean_rows([[2,4],[6,8]]) = [[4,6]]."""
    n = a.shape[0]
    out_data = a.data.mean(axis=0, dtype=np.float64).reshape(1, -1).astype(a.dtype)

    def backward(g, out):
        _accum(a, np.repeat(g / n, n, axis=0))

    return _make(out_data, (a,), backward)


def gather_rows(a, indexes):
    """Select rows by index (with repeats allowed); backward scatters."""
    idx = np.asarray(indexes, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows takes a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows index out of range for {a.shape[0]} rows")
    out_data = a.data[idx]

    def backward(g, out):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    return _make(out_data, (a,), backward)


def take_per_row(a, indexes):
    """out[k, 0] = a[k, indexes[k]] -> Kx1 column."""
    idx = np.asarray(indexes, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ValueError(f"take_per_row needs one index per row, got {idx.shape} for {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"take_per_row index out of range for {a.shape[1]} cols")
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx].reshape(-1, 1)

    def backward(g, out):
        acc = np.zeros_like(a.data)
        acc[rows, idx] = g[:, 0]
        _accum(a, acc)

    return _make(out_data, (a,), backward)


def sum_all(a):
    out_data = np.array([[np.sum(a.data, dtype=np.float64)]], dtype=a.dtype)

    def backward(g, out):
        _accum(a, np.full_like(a.data, g[0, 0]))

    return _make(out_data, (a,), backward)


def mean_all(a):
    n = a.data.size
    out_data = np.array([[np.sum(a.data, dtype=np.float64) / n]], dtype=a.dtype)

    def backward(g, out):
        _accum(a, np.full_like(a.data, g[0, 0] / n))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    _finite(a.data, "relu input")
    out_data = np.maximum(a.data, 0)

    def backward(g, out):
        _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), backward)


def tanh(a):
    _finite(a.data, "tanh input")
    out_data = np.tanh(a.data)

    def backward(g, out):
        _accum(a, g * (1.0 - out.data * out.data))

    return _make(out_data, (a,), backward)


def exp(a):
    _finite(a.data, "exp input")
    out_data = np.exp(a.data)

    def backward(g, out):
        _accum(a, g * out.data)

    return _make(out_data, (a,), backward)


def softmax_rows(a):
    """Row softmax, stabilized by subtracting the row max."""
    _finite(a.data, "softmax input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g, out):
        s = out.data
        dot = np.sum(g * s, axis=1, keepdims=True)
        _accum(a, s * (g - dot))

    return _make(out_data, (a,), backward)


def log_softmax_rows(a):
    _finite(a.data, "log_softmax input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse

    def backward(g, out):
        s = np.exp(out.data)
        rowsum = g.sum(axis=1, keepdims=True)
        _accum(a, g - s * rowsum)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate .grad on every requires_grad leaf reachable from scalar loss."""
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise RuntimeError("backward called twice on the same graph without reset")
    if not loss.requires_grad or loss._backward is None and not loss._parents:
        if not loss.requires_grad:
            raise RuntimeError("loss is detached from any requires_grad leaf")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)
    loss._done = True
    # Release closures so intermediate buffers free up; grads on leaves stay.
    for node in topo:
        if node._backward is not None:
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, params, eps=1e-5, samples_per_param=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    f(params) must rebuild the graph and return a scalar Tensor. Checks every
    entry when samples_per_param is None, otherwise a random sample per
    parameter. Error metric: |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params.values():
        p.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            picks = range(n)
        else:
            picks = rng.choice(n, size=samples_per_param, replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + eps
            up = f(params).item()
            flat[j] = orig - eps
            down = f(params).item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[name].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter moments + step counter for the Adam update."""

    def __init__(self, params, lr, lr_decay=1.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.lr_decay = float(lr_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def decay_epoch(self):
        self.lr *= self.lr_decay


def adam_step(params, state):
    """Standard Adam update in place; clears gradients afterwards."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"adam_step before backward: no gradient for {missing[0]}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / bias1) * m / (np.sqrt(v / bias2) + state.eps)
        p.data -= update.astype(p.data.dtype)
        p.grad = None


def clip_grad_norm(params, max_norm):
    """Global-norm gradient clipping; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# parameter construction and raw serialization
# ---------------------------------------------------------------------------

def init_matrix(rows, cols, rng, dtype=None):
    """Uniform in [-1/sqrt(rows), +1/sqrt(rows)]; rows is the fan-in."""
    bound = 1.0 / math.sqrt(rows)
    data = rng.uniform(-bound, bound, size=(rows, cols))
    return Tensor(data.astype(dtype if dtype is not None else DEFAULT_DTYPE),
                  requires_grad=True, dtype=dtype)


def zeros(rows, cols, dtype=None):
    return Tensor(np.zeros((rows, cols)), requires_grad=True, dtype=dtype)


def constant(data, dtype=None):
    """Non-trainable tensor (coordinates, masks, precomputed features)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def params_to_records(params):
    """name -> {shape, dtype, data_b64} with raw little-endian bytes."""
    records = {}
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        records[name] = {
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "data_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
    return records


def records_to_arrays(records):
    arrays = {}
    for name, rec in records.items():
        raw = base64.b64decode(rec["data_b64"])
        arr = np.frombuffer(raw, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"]).copy()
        arrays[name] = arr
    return arrays
