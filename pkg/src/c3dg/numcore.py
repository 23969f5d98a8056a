"""Small reverse-mode differentiation engine over numpy float64 arrays.

Only the primitives the CRIB pipeline needs are provided.  Operations
executed inside an active :class:`Tape` are recorded; outside of one they
compute plain values, which is how inference stays side-effect free.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


_state = threading.local()


def active_tape():
    return getattr(_state, "tape", None)


class DiffArray:
    """A float64 array that may take part in a tape.

    Leaves created with ``requires_grad=True`` are parameters: backward
    accumulates into their ``grad`` slot.  Arrays produced by recorded
    operations carry a ``node`` index into their tape.
    """

    __slots__ = ("value", "grad", "requires_grad", "tape", "node", "name")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self):
        return self.requires_grad or self.tape is not None

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"DiffArray{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_array(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


@dataclass
class _Record:
    out: DiffArray
    inputs: tuple
    backward: object


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every operation on tracked arrays executed
    inside the block is appended in execution order, so records only ever
    refer to earlier nodes.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        # Smallest |input| seen by any ReLU; finite-difference checks use it
        # to detect evaluation points sitting on a kink.
        self.relu_margin = math.inf
        self._previous = None

    def __enter__(self):
        self._previous = active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._previous
        self._previous = None
        return False

    def record(self, value, inputs, backward):
        out = DiffArray(value)
        out.tape = self
        out.node = len(self.records)
        self.records.append(_Record(out, tuple(inputs), backward))
        return out

    def backward(self, root: DiffArray):
        """Accumulate d(root)/d(param) into every parameter's ``grad``."""
        if self.consumed:
            raise TapeStateError("backward already ran on this tape; run a new forward pass")
        if root.tape is not self:
            raise ContractError("root was not produced on this tape")
        if root.value.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
        self.consumed = True
        grads = {root.node: np.ones_like(root.value)}
        for rec in reversed(self.records[: root.node + 1]):
            g = grads.pop(rec.out.node, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not isinstance(inp, DiffArray):
                    continue
                if inp.tape is self:
                    prev = grads.get(inp.node)
                    grads[inp.node] = gi if prev is None else prev + gi
                elif inp.requires_grad:
                    inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi


def backward(tape: Tape, root: DiffArray):
    tape.backward(root)


def _op(value, inputs, backward_fn):
    tape = active_tape()
    if tape is None or not any(isinstance(i, DiffArray) and i.tracked for i in inputs):
        return DiffArray(value)
    return tape.record(value, inputs, backward_fn)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_array(a), as_array(b)
    sa, sb = a.shape, b.shape
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_array(a), as_array(b)
    sa, sb = a.shape, b.shape
    return _op(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_array(a), as_array(b)
    av, bv = a.value, b.value
    return _op(av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(x):
    x = as_array(x)
    v = x.value
    return _op(v * v, (x,), lambda g: (2.0 * v * g,))


def exp(x):
    x = as_array(x)
    out = np.exp(x.value)
    return _op(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_array(x)
    v = x.value
    return _op(np.log(v), (x,), lambda g: (g / v,))


def relu(x):
    x = as_array(x)
    v = x.value
    tape = active_tape()
    if tape is not None and x.tracked and v.size:
        tape.relu_margin = min(tape.relu_margin, float(np.min(np.abs(v))))
    # subgradient at exactly 0 is 0
    mask = v > 0
    return _op(np.where(mask, v, 0.0), (x,), lambda g: (g * mask,))


# reductions and reshaping ----------------------------------------------------

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_array(x)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _op(x.value.sum(axis=axis), (x,), back)


def mean(x, axis=None):
    x = as_array(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    x = as_array(x)
    old = x.shape
    return _op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, index):
    x = as_array(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _op(x.value[index], (x,), back)


def concat(parts, axis=0):
    parts = [as_array(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _op(np.concatenate([p.value for p in parts], axis=axis), parts,
               lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(x, idx):
    """Rows ``x[idx]`` along axis 0."""
    x = as_array(x)
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _op(x.value[idx], (x,), back)


def assemble_rows(parts, index_lists, n):
    """Inverse of ``take_rows``: place part k at rows ``index_lists[k]``."""
    parts = [as_array(p) for p in parts]
    tail = parts[0].shape[1:]
    out = np.zeros((n,) + tail)
    idx = [np.asarray(i, dtype=np.intp) for i in index_lists]
    for p, i in zip(parts, idx):
        out[i] = p.value
    return _op(out, parts, lambda g: tuple(g[i] for i in idx))


# layers -------------------------------------------------------------------

def affine(x, W, b):
    """``x @ W.T + b`` for a vector or a batch of row vectors."""
    x, W, b = as_array(x), as_array(W), as_array(b)
    if W.value.ndim != 2 or b.value.shape != (W.shape[0],):
        raise ShapeError(f"affine: W {W.shape} and b {b.shape} disagree")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: input length {x.shape[-1]} but W has {W.shape[1]} columns")
    xv, Wv = x.value, W.value

    def back(g):
        g2 = g.reshape(-1, Wv.shape[0])
        x2 = xv.reshape(-1, Wv.shape[1])
        return ((g @ Wv), g2.T @ x2, g2.sum(axis=0))

    return _op(xv @ Wv.T + b.value, (x, W, b), back)


def _im2col(xv, k):
    pad = k // 2
    n, cin, length = xv.shape
    padded = np.zeros((n, cin, length + 2 * pad))
    padded[:, :, pad:pad + length] = xv
    return np.stack([padded[:, :, j:j + length] for j in range(k)], axis=2)


def conv1d(signal, kernels, bias):
    """Stride-1, zero-padded 'same' cross-correlation.

    ``signal`` is (in_ch, length) or (batch, in_ch, length); ``kernels`` is
    (out_ch, in_ch, k) with k odd.
    """
    signal, kernels, bias = as_array(signal), as_array(kernels), as_array(bias)
    Kv = kernels.value
    if Kv.ndim != 3 or Kv.shape[2] % 2 == 0:
        raise ShapeError(f"conv1d: kernels must be out x in x odd-k, got {Kv.shape}")
    xv = signal.value
    single = xv.ndim == 2
    if single:
        xv = xv[None]
    if xv.ndim != 3 or xv.shape[1] != Kv.shape[1]:
        raise ShapeError(f"conv1d: signal channels {signal.shape} do not match kernels {Kv.shape}")
    if bias.value.shape != (Kv.shape[0],):
        raise ShapeError(f"conv1d: bias shape {bias.shape} for {Kv.shape[0]} output channels")
    k = Kv.shape[2]
    cols = _im2col(xv, k)
    out = np.einsum("oik,nikl->nol", Kv, cols) + bias.value[None, :, None]

    def back(g):
        g3 = g[None] if single else g
        dK = np.einsum("nol,nikl->oik", g3, cols)
        dcols = np.einsum("oik,nol->nikl", Kv, g3)
        pad = k // 2
        length = xv.shape[2]
        dpad = np.zeros((xv.shape[0], xv.shape[1], length + 2 * pad))
        for j in range(k):
            dpad[:, :, j:j + length] += dcols[:, :, j, :]
        dx = dpad[:, :, pad:pad + length]
        return (dx[0] if single else dx, dK, g3.sum(axis=(0, 2)))

    return _op(out[0] if single else out, (signal, kernels, bias), back)


def log_softmax(logits):
    logits = as_array(logits)
    v = logits.value
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _op(out, (logits,), back)


def softmax(logits):
    return exp(log_softmax(logits))


def softmax_cross_entropy(logits, target):
    """-log softmax(logits)[target].

    A single logit vector with an int target gives a scalar; a (N, C) batch
    with N targets gives the length-N vector of per-sample losses.
    """
    logits = as_array(logits)
    v = logits.value
    t = np.asarray(target, dtype=np.intp)
    ncls = v.shape[-1]
    if np.any(t < 0) or np.any(t >= ncls):
        raise IndexError(f"target {target} outside [0, {ncls})")
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    p = np.exp(logp)
    onehot = np.zeros_like(v)
    if v.ndim == 1:
        onehot[int(t)] = 1.0
        loss = -logp[int(t)]
    else:
        rows = np.arange(v.shape[0])
        onehot[rows, t] = 1.0
        loss = -logp[rows, t]

    def back(g):
        g = np.asarray(g)
        return ((p - onehot) * (g[..., None] if v.ndim > 1 else g),)

    return _op(loss, (logits,), back)


def reparameterize(mu, logvar, rng=None, eps=None):
    """``mu + exp(logvar / 2) * eps`` with eps ~ N(0, I) drawn from ``rng``.

    ``eps`` may be supplied directly; it is treated as a constant.
    """
    mu, logvar = as_array(mu), as_array(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape} vs logvar {logvar.shape}")
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    std = exp(mul(logvar, 0.5))
    return add(mu, mul(std, np.asarray(eps, dtype=np.float64)))


def interp_matrix(n, m):
    """(m, n) align-corners linear interpolation matrix."""
    if n < 2 or m < 2:
        raise ContractError(f"interp_linear needs n >= 2 and m >= 2, got n={n}, m={m}")
    M = np.zeros((m, n))
    for j in range(m):
        t = j * (n - 1) / (m - 1)
        lo = min(int(math.floor(t)), n - 2)
        frac = t - lo
        M[j, lo] += 1.0 - frac
        M[j, lo + 1] += frac
    return M


def interp_linear(v, m):
    """Resample the last axis of ``v`` (length n) to length m, endpoints kept."""
    v = as_array(v)
    n = v.shape[-1]
    M = interp_matrix(n, m)
    vv = v.value
    out = vv @ M.T
    # exact endpoints regardless of rounding in the weights
    out[..., 0] = vv[..., 0]
    out[..., -1] = vv[..., -1]
    return _op(out, (v,), lambda g: (g @ M,))


# optimisation --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam with decoupled weight decay, updating in place.

    ``params`` are DiffArrays (or arrays); ``grads`` aligned arrays.  A None
    gradient means the parameter took no part in the step: it is left
    untouched, moments and weight decay included.
    """
    if state.lr <= 0:
        raise ContractError(f"lr must be positive, got {state.lr}")
    values = [p.value if isinstance(p, DiffArray) else p for p in params]
    if not state.m:
        state.m = [np.zeros_like(v) for v in values]
        state.v = [np.zeros_like(v) for v in values]
    if len(state.m) != len(values):
        raise ShapeError("parameter list length changed between Adam steps")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for value, g, m, v in zip(values, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != value.shape or m.shape != value.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {value.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            value -= state.lr * state.weight_decay * value
        value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    skipped: bool = False
    reason: str = ""
    n_checked: int = 0


def grad_check(f, point, tol=1e-5, h=1e-5, floor=1e-3, max_coords=None, rng=None):
    """Compare tape gradients of scalar ``f(*arrays)`` with central differences.

    ``point`` is a list of numpy arrays.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.  Points closer than ``2h`` to a ReLU
    kink are reported as skipped rather than judged.  ``max_coords`` checks
    only that many randomly chosen entries per array (drawn from ``rng``).
    """
    base = [np.array(p, dtype=np.float64) for p in point]
    leaves = [DiffArray(p.copy(), requires_grad=True) for p in base]
    with Tape() as tape:
        out = f(*leaves)
    if tape.relu_margin < 2 * h:
        return GradCheckReport(True, 0.0, skipped=True,
                               reason=f"ReLU input within {tape.relu_margin:.2e} of the kink")
    tape.backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]

    def evaluate(arrays):
        return float(f(*[DiffArray(a) for a in arrays]).value)

    worst = 0.0
    count = 0
    rng = rng if rng is not None else np.random.default_rng(0)
    for k, arr in enumerate(base):
        coords = list(np.ndindex(arr.shape))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in np.sort(rng.choice(len(coords), max_coords, replace=False))]
        for idx in coords:
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[k][idx] += h
            minus[k][idx] -= h
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            count += 1
    return GradCheckReport(worst <= tol, worst, n_checked=count)
