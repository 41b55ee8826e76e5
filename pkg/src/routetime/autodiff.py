"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records a node on the owning tape; ``backward`` replays the
tape in reverse and accumulates gradients per value id.  Tensors are
immutable once created, and a tape is strictly single-threaded.  All math is
64-bit; any non-finite forward result raises ``NumericError`` immediately so
bad batches fail loudly instead of corrupting training.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericError, ShapeError

_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    """Globally enable/disable the per-op finite guard (on by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Node:
    """One recorded operation: kind, operand ids, output id, grad closure."""

    __slots__ = ("kind", "input_ids", "out_id", "grad_fn")

    def __init__(self, kind, input_ids, out_id, grad_fn):
        self.kind = kind
        self.input_ids = input_ids
        self.out_id = out_id
        self.grad_fn = grad_fn


class Tensor:
    """Immutable float64 array bound to a tape by value id."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data: np.ndarray, tape: "Tape", vid: int):
        self.data = data
        self.tape = tape
        self.id = vid

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.data.shape})"


class Tape:
    """Append-only computation record; inputs always precede their node."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._next_id = 0

    def _alloc(self) -> int:
        vid = self._next_id
        self._next_id += 1
        return vid

    def tensor(self, data) -> Tensor:
        """Create a leaf value (input or parameter binding)."""
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        return Tensor(arr, self, self._alloc())

    def _record(self, kind, inputs, out_data, grad_fn) -> Tensor:
        _check_finite(out_data, kind)
        out = Tensor(out_data, self, self._alloc())
        self.nodes.append(Node(kind, tuple(t.id for t in inputs), out.id, grad_fn))
        return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Populate gradients for every value reachable from a scalar loss.

    Returns the id -> gradient map (also stored as ``tape.gradients``).
    The gradient of the loss wrt itself is 1.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for vid, contrib in node.grad_fn(g):
            if vid in grads:
                grads[vid] = grads[vid] + contrib
            else:
                grads[vid] = contrib
    tape.gradients = grads
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _same_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ContractError("operands belong to different tapes")
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def grad_fn(g):
        return [(a.id, _unbroadcast(g, ash)), (b.id, _unbroadcast(g, bsh))]

    return tape._record("add", (a, b), out, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape

    def grad_fn(g):
        return [(a.id, _unbroadcast(g, ash)), (b.id, _unbroadcast(-g, bsh))]

    return tape._record("sub", (a, b), out, grad_fn)


def neg(a: Tensor) -> Tensor:
    return a.tape._record("neg", (a,), -a.data, lambda g: [(a.id, -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return [(a.id, _unbroadcast(g * bd, ad.shape)),
                (b.id, _unbroadcast(g * ad, bd.shape))]

    return tape._record("mul", (a, b), out, grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return [(a.id, _unbroadcast(g / bd, ad.shape)),
                (b.id, _unbroadcast(-g * ad / (bd * bd), bd.shape))]

    return tape._record("div", (a, b), out, grad_fn)


def add_const(a: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (scalar or ndarray)."""
    c = np.asarray(c, dtype=np.float64)
    out = a.data + c
    ash = a.data.shape
    return a.tape._record("add_const", (a,), out,
                          lambda g: [(a.id, _unbroadcast(g, ash))])


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a non-differentiable constant (masks, scales)."""
    c = np.asarray(c, dtype=np.float64)
    out = a.data * c
    ash = a.data.shape
    return a.tape._record("mul_const", (a,), out,
                          lambda g: [(a.id, _unbroadcast(g * c, ash))])


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions broadcast like np.matmul."""
    tape = _same_tape(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    if ad.ndim > 2 and bd.ndim == 2:
        # shared-weight case: one large 2-d product beats a batched gemm loop
        flat = ad.reshape(-1, ad.shape[-1])
        out = (flat @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def grad_fn(g):
            g2 = g.reshape(-1, bd.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = flat.T @ g2
            return [(a.id, ga), (b.id, gb)]

        return tape._record("matmul", (a, b), out, grad_fn)
    out = np.matmul(ad, bd)

    def grad_fn(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return [(a.id, _unbroadcast(ga, ad.shape)), (b.id, _unbroadcast(gb, bd.shape))]

    return tape._record("matmul", (a, b), out, grad_fn)


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError("swap_last needs a >=2-d tensor")
    out = a.data.swapaxes(-1, -2).copy()
    return a.tape._record("swap_last", (a,), out,
                          lambda g: [(a.id, g.swapaxes(-1, -2))])


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# activations and pointwise transforms

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    ad = a.data
    return a.tape._record("relu", (a,), out, lambda g: [(a.id, g * (ad > 0))])


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return a.tape._record("sigmoid", (a,), out,
                          lambda g: [(a.id, g * out * (1.0 - out))])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return a.tape._record("tanh", (a,), out,
                          lambda g: [(a.id, g * (1.0 - out * out))])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.tape._record("exp", (a,), out, lambda g: [(a.id, g * out)])


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    ad = a.data
    return a.tape._record("log", (a,), out, lambda g: [(a.id, g / ad)])


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return a.tape._record("sqrt", (a,), out,
                          lambda g: [(a.id, g / (2.0 * out))])


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    out = np.logaddexp(0.0, a.data)
    ad = a.data
    return a.tape._record("softplus", (a,), out,
                          lambda g: [(a.id, g / (1.0 + np.exp(-ad)))])


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient is zero at and below the floor."""
    out = np.maximum(a.data, floor)
    ad = a.data
    return a.tape._record("clamp_min", (a,), out,
                          lambda g: [(a.id, g * (ad > floor))])


# ---------------------------------------------------------------------------
# reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    ash = a.data.shape

    def grad_fn(g):
        if axis is None:
            return [(a.id, np.broadcast_to(g, ash).copy())]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [(a.id, np.broadcast_to(g, ash).copy())]

    return a.tape._record("sum", (a,), out, grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    ash = a.data.shape
    count = a.data.size if axis is None else a.data.shape[axis]

    def grad_fn(g):
        if axis is None:
            return [(a.id, np.broadcast_to(g, ash).copy() / count)]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [(a.id, np.broadcast_to(g, ash).copy() / count)]

    return a.tape._record("mean", (a,), out, grad_fn)


# ---------------------------------------------------------------------------
# structural ops

def concat(tensors, axis: int = -1) -> Tensor:
    tape = _same_tape(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    ids = [t.id for t in tensors]

    def grad_fn(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return list(zip(ids, pieces))

    return tape._record("concat", tuple(tensors), out, grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} "
                         f"of shape {a.data.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()
    ash = a.data.shape

    def grad_fn(g):
        z = np.zeros(ash)
        z[idx] = g
        return [(a.id, z)]

    return a.tape._record("narrow", (a,), out, grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    ash = a.data.shape
    return a.tape._record("reshape", (a,), out,
                          lambda g: [(a.id, g.reshape(ash))])


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    ash = a.data.shape
    return a.tape._record("broadcast_to", (a,), out,
                          lambda g: [(a.id, _unbroadcast(g, ash))])


def gather_rows(a: Tensor, indices) -> Tensor:
    """Row lookup along axis 0 (embedding-style); gradients scatter-add."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx].copy()
    ash = a.data.shape

    def grad_fn(g):
        z = np.zeros(ash)
        np.add.at(z, idx, g)
        return [(a.id, z)]

    return a.tape._record("gather_rows", (a,), out, grad_fn)


def select_rows(a: Tensor, indices) -> Tensor:
    """Per-batch row selection: a[b, indices[b]] for a of shape (B, L, ...)."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim < 2 or idx.shape != (a.data.shape[0],):
        raise ShapeError(f"select_rows needs (B, L, ...) data and (B,) indices, "
                         f"got {a.data.shape} and {idx.shape}")
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx].copy()
    ash = a.data.shape

    def grad_fn(g):
        z = np.zeros(ash)
        np.add.at(z, (rows, idx), g)
        return [(a.id, z)]

    return a.tape._record("select_rows", (a,), out, grad_fn)


# ---------------------------------------------------------------------------
# softmax and regularisation

def masked_softmax(a: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (bool, broadcastable).

    Masked positions are exactly zero in the output; unmasked entries are
    positive and sum to one.  Stabilised by max subtraction over the valid
    entries, so inputs up to +-1e6 are safe.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    if not m.any(axis=-1).all():
        raise DegenerateInputError("masked_softmax: a row has no unmasked positions")
    neg = np.where(m, a.data, -np.inf)
    top = neg.max(axis=-1, keepdims=True)
    z = np.where(m, np.exp(np.where(m, a.data, top) - top), 0.0)
    out = z / z.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return [(a.id, out * (g - inner))]

    return a.tape._record("masked_softmax", (a,), out, grad_fn)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate); identity in eval mode."""
    if not train or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = a.data * keep
    return a.tape._record("dropout", (a,), out,
                          lambda g: [(a.id, g * keep)])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift (fused primitive)."""
    tape = _same_tape(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    gsh, bsh = gamma.data.shape, beta.data.shape

    def grad_fn(g):
        dgamma = _unbroadcast(g * xhat, gsh)
        dbeta = _unbroadcast(g, bsh)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return [(x.id, dx), (gamma.id, dgamma), (beta.id, dbeta)]

    return tape._record("layer_norm", (x, gamma, beta), out, grad_fn)
