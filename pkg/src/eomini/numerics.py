"""Dense tensors with reverse-mode automatic differentiation on a recorded tape.

Just enough machinery for a small transformer: 2-D/3-D matmul, elementwise ops,
softmax, RMSNorm, gather/scatter, fused attention and the two losses. Arrays
are numpy (fp32 for training, fp64 for gradient checking); the tape and every
backward rule are implemented here so they can be validated against central
differences.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class NumericsError(Exception):
    """Base class for numeric-core failures."""


class DimensionError(NumericsError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(NumericsError):
    """API misuse: non-scalar loss, double backward, mixed dtypes, ..."""


class NonFiniteError(NumericsError):
    """A completed operation produced NaN or Inf."""


class EmptyLossError(NumericsError):
    """A loss was requested over an empty mask."""


_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = False
_ACTIVE_TAPE: Optional["Tape"] = None
# Test hook for negative-control gradient checks: backward rules of ops listed
# here are deliberately scaled by 2.
_BROKEN_BACKWARD: set[str] = set()


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the creation dtype (fp64 for gradient checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Verify every op output is finite (debug mode; names the offending op)."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


@contextlib.contextmanager
def broken_backward(op_name: str):
    """Test hook: corrupt the named op's backward rule inside the block."""
    _BROKEN_BACKWARD.add(op_name)
    try:
        yield
    finally:
        _BROKEN_BACKWARD.discard(op_name)


class Tensor:
    """A dense n-d value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    visits: int = 0


@dataclass
class Tape:
    """Ordered record of operations; inputs of a node always precede it."""

    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False
    visited_nodes: int = 0

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self.nodes)


def _finite_or_raise(op: str, out: np.ndarray) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    _finite_or_raise(op, out_data)
    needs = _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        if op in _BROKEN_BACKWARD:
            inner = backward
            backward = lambda g: tuple(None if d is None else 2.0 * d for d in inner(g))
        _ACTIVE_TAPE.nodes.append(TapeNode(op, inputs, out, backward))
    return out


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)} in one graph")


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate gradients of `loss` into every requires_grad tensor on the tape.

    Each node is visited exactly once, in reverse recording order. A tape can
    be walked only once; build a fresh tape per training step.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward call")
    if not any(n.output is loss for n in tape.nodes):
        raise ContractError("loss was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        node.visits += 1
        tape.visited_nodes += 1
        in_grads = node.backward(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            g = grads[key].astype(t.data.dtype, copy=False).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product or stacked 3-D batched product."""
    _check_same_dtype("matmul", a, b)
    sa, sb = a.shape, b.shape
    if len(sa) != len(sb) or len(sa) not in (2, 3) or sa[-1] != sb[-2] or (len(sa) == 3 and sa[0] != sb[0]):
        raise DimensionError(f"matmul: incompatible shapes {sa} x {sb}")
    out = a.data @ b.data

    def bwd(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return _record("matmul", (a, b), out, bwd)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    _check_same_dtype(op, a, b)
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _record("add", (a,), a.data + c, lambda g: (g,))
    _binary_shapes("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _record("sub", (a,), a.data - c, lambda g: (g,))
    _binary_shapes("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    return _record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", (a,), a.data * s, lambda g: (g * s,))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def bwd(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _record("silu", (a,), out, bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record("softmax_rows", (a,), p, bwd)


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x * gain / sqrt(mean(x^2) + eps) along the last axis."""
    _check_same_dtype("rms_norm", a, gain)
    if a.shape[-1] != gain.shape[0] or gain.data.ndim != 1:
        raise DimensionError(f"rms_norm: gain shape {gain.shape} vs feature dim {a.shape[-1]}")
    if eps <= 0:
        raise ContractError("rms_norm: eps must be positive")
    x = a.data
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    out = x * inv * gain.data

    def bwd(g):
        u = x * inv
        dgain = np.sum(g * u, axis=tuple(range(x.ndim - 1)))
        gg = g * gain.data
        dx = inv * gg - (inv**3 / d) * x * np.sum(gg * x, axis=-1, keepdims=True)
        return dx, dgain

    return _record("rms_norm", (a, gain), out, bwd)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row copies table[ids]; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows: ids must be a flat list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return _record("gather_rows", (table,), out, bwd)


embedding_gather = gather_rows


def row_assemble(n_rows: int, pieces: Sequence[tuple[Tensor, np.ndarray]]) -> Tensor:
    """Scatter row blocks into an n_rows matrix; indices must partition the rows."""
    if not pieces:
        raise ContractError("row_assemble: no pieces")
    _check_same_dtype("row_assemble", *[p for p, _ in pieces])
    d = pieces[0][0].shape[-1]
    out = np.empty((n_rows, d), dtype=pieces[0][0].data.dtype)
    index_sets = []
    seen = np.zeros(n_rows, dtype=bool)
    for t, idx in pieces:
        idx = np.asarray(idx, dtype=np.int64)
        if t.shape != (idx.size, d):
            raise DimensionError(f"row_assemble: piece shape {t.shape} vs {idx.size} indices")
        if seen[idx].any():
            raise ContractError("row_assemble: overlapping row indices")
        seen[idx] = True
        out[idx] = t.data
        index_sets.append(idx)
    if not seen.all():
        raise ContractError("row_assemble: indices do not cover all rows")

    def bwd(g):
        return tuple(g[idx] for idx in index_sets)

    return _record("row_assemble", tuple(t for t, _ in pieces), out, bwd)


def take_rows(a: Tensor, ids) -> Tensor:
    """Alias of gather_rows for readout-row selection."""
    return gather_rows(a, ids)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias to every row of a [..., d] tensor."""
    _check_same_dtype("add_bias", x, b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} vs features {x.shape[-1]}")
    lead = tuple(range(x.data.ndim - 1))
    return _record("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=lead)))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements (scalar output)."""
    shape = a.shape
    dt = a.data.dtype
    return _record("tsum", (a,), np.asarray(a.data.sum(), dtype=dt), lambda g: (np.broadcast_to(g, shape).astype(dt),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    dt = a.data.dtype
    return _record(
        "tmean", (a,), np.asarray(a.data.mean(), dtype=dt), lambda g: ((np.broadcast_to(g, shape) / n).astype(dt),)
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over masked positions of -log softmax(logits)[target]."""
    tg = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if tg.shape != (n,):
        raise DimensionError(f"cross_entropy: {tg.shape[0] if tg.ndim else 0} targets for {n} rows")
    msk = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if msk.shape != (n,):
        raise DimensionError("cross_entropy: mask length mismatch")
    count = int(msk.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: empty mask")
    if tg[msk].size and (tg[msk].min() < 0 or tg[msk].max() >= v):
        raise IndexError("cross_entropy: target id out of range")

    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = np.sum(e, axis=-1, keepdims=True)
    p = e / z
    ll = (x - m - np.log(z))[np.arange(n), tg]
    loss = np.asarray(-(ll[msk].mean()), dtype=x.dtype)

    def bwd(g):
        d = p.copy()
        d[np.arange(n), tg] -= 1.0
        d[~msk] = 0.0
        return (d * (g / count),)

    return _record("cross_entropy", (logits,), loss, bwd)


def mse(pred: Tensor, target: Tensor, mask=None) -> Tensor:
    """Mean squared error over the rows selected by `mask` (all rows if None)."""
    _binary_shapes("mse", pred, target)
    n = pred.shape[0]
    msk = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if msk.shape != (n,):
        raise DimensionError("mse: mask length mismatch")
    if not msk.any():
        raise EmptyLossError("mse: empty mask")
    diff = pred.data - target.data
    diff[~msk] = 0.0
    count = int(msk.sum()) * int(np.prod(pred.shape[1:], dtype=np.int64)) if pred.data.ndim > 1 else int(msk.sum())
    loss = np.asarray((diff * diff).sum() / count, dtype=pred.data.dtype)

    def bwd(g):
        d = diff * (2.0 * g / count)
        return d, -d

    return _record("mse", (pred, target), loss, bwd)


# ---------------------------------------------------------------------------
# Fused attention
# ---------------------------------------------------------------------------


def block_causal_attention(q: Tensor, k: Tensor, v: Tensor, bounds: Sequence[tuple[int, int]], n_heads: int) -> Tensor:
    """Multi-head causal self-attention restricted to [start, end) member blocks.

    q/k/v are [n, d] with d = n_heads * head_dim. Tokens attend to positions
    j <= i inside their own block only, which is exactly the packed-batch
    attention mask evaluated without materializing the n x n matrix.
    """
    _check_same_dtype("block_causal_attention", q, k, v)
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise DimensionError("block_causal_attention: q/k/v shapes differ")
    if d % n_heads:
        raise DimensionError(f"block_causal_attention: dim {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    inv_scale = 1.0 / np.sqrt(hd)
    out = np.empty_like(q.data)
    saved = []
    for start, end in bounds:
        t = end - start
        qm = q.data[start:end].reshape(t, n_heads, hd).transpose(1, 0, 2)
        km = k.data[start:end].reshape(t, n_heads, hd).transpose(1, 0, 2)
        vm = v.data[start:end].reshape(t, n_heads, hd).transpose(1, 0, 2)
        scores = (qm @ km.transpose(0, 2, 1)) * inv_scale
        ii, jj = np.triu_indices(t, k=1)
        scores[:, ii, jj] = -np.inf
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=-1, keepdims=True)
        om = p @ vm
        out[start:end] = om.transpose(1, 0, 2).reshape(t, d)
        saved.append((start, end, qm, km, vm, p))

    def bwd(g):
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        dv = np.zeros_like(v.data)
        for start, end, qm, km, vm, p in saved:
            t = end - start
            gm = g[start:end].reshape(t, n_heads, hd).transpose(1, 0, 2)
            dvm = p.transpose(0, 2, 1) @ gm
            dp = gm @ vm.transpose(0, 2, 1)
            ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
            dqm = (ds @ km) * inv_scale
            dkm = (ds.transpose(0, 2, 1) @ qm) * inv_scale
            dq[start:end] = dqm.transpose(1, 0, 2).reshape(t, d)
            dk[start:end] = dkm.transpose(1, 0, 2).reshape(t, d)
            dv[start:end] = dvm.transpose(1, 0, 2).reshape(t, d)
        return dq, dk, dv

    return _record("block_causal_attention", (q, k, v), out, bwd)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, n_heads: int) -> Tensor:
    """Attention from primitive ops under an arbitrary boolean mask.

    Slower than block_causal_attention; used for non-default mask variants and
    as the composition reference in equivalence tests.
    """
    n, d = q.shape
    hd = d // n_heads
    bias = np.where(mask, 0.0, -1e30).astype(q.data.dtype)
    qh = transpose(reshape(q, (n, n_heads, hd)), (1, 0, 2))
    kh = transpose(reshape(k, (n, n_heads, hd)), (1, 0, 2))
    vh = transpose(reshape(v, (n, n_heads, hd)), (1, 0, 2))
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(hd))
    biased = add(scores, Tensor(np.broadcast_to(bias, scores.shape).copy(), dtype=q.data.dtype))
    p = softmax_rows(biased)
    oh = matmul(p, vh)
    return reshape(transpose(oh, (1, 0, 2)), (n, d))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        lines = [f"{e.name}: max rel err {e.max_rel_err:.3e}" for e in self.entries]
        lines.append(f"overall: {self.max_rel_err:.3e} ({'PASS' if self.passed else 'FAIL'} at tol {self.tol:g})")
        return "\n".join(lines)


def grad_check(f, inputs: Sequence[Tensor], eps: float = 1e-5, tol: float = 1e-4,
               names: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Compare tape gradients of scalar f(*inputs) against central differences.

    Inputs must be fp64 tensors with requires_grad set; f must be pure.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractError("grad_check requires fp64 inputs")
        t.zero_grad()
    with Tape() as tape:
        loss = f(*inputs)
    if loss.shape != ():
        raise ContractError("grad_check: f must be scalar-valued")
    backward(loss, tape)

    entries = []
    for i, t in enumerate(inputs):
        name = names[i] if names else f"input{i}"
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(f(*inputs).data)
            flat[j] = orig - eps
            lo = float(f(*inputs).data)
            flat[j] = orig
            nflat[j] = (hi - lo) / (2.0 * eps)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        rel = np.abs(analytic - numeric) / denom
        entries.append(GradCheckEntry(name, float(rel.max()) if rel.size else 0.0))
    return GradCheckReport(entries, tol)
