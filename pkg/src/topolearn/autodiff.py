"""Define-by-run reverse-mode autodiff over dense numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded in order;
``tape.backward(loss)`` replays their adjoints in reverse and accumulates into
``Parameter.grad``. Outside a tape the same functions just compute values.
"""
from __future__ import annotations

import contextlib
import contextvars
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

ROLES = ("node-weight", "edge-weight", "head", "classifier", "norm-scale", "norm-shift")

_current_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "current_tape", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        if self.data.ndim > 2:
            raise ValueError(f"tensors are rank <= 2, got shape {self.data.shape}")
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """Trainable tensor with a gradient accumulator and a role tag."""

    __slots__ = ("grad", "role", "frozen")

    def __init__(self, data, role: str, dtype=None) -> None:
        if role not in ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data = self.data.copy()  # own the buffer; callers may pass read-only views
        self.role = role
        self.frozen = False
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(role={self.role}, shape={self.shape})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of executed primitives, replayed once in reverse by :meth:`backward`."""

    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> Tape:
        self._token = _current_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _current_tape.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.records.append(_Record(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            upstream = adjoints.pop(id(rec.out), None)
            if upstream is None:
                continue
            grads = rec.backward(upstream)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    # leaves: accumulate straight into the parameter
                    inp.grad = inp.grad + g.astype(inp.grad.dtype, copy=False)
                    continue
                key = id(inp)
                adjoints[key] = adjoints[key] + g if key in adjoints else g
        if isinstance(loss, Parameter):
            loss.grad = loss.grad + np.ones_like(loss.grad)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, dtype=value.dtype)
    tape = _current_tape.get()
    if tape is not None and needs:
        tape.record(out, inputs, backward)
    return out


def constant(value, dtype=None) -> Tensor:
    return Tensor(value, dtype=dtype)


# -- primitives ---------------------------------------------------------------


def weighted_sum(inputs: Sequence[Tensor], alphas: Sequence[Tensor] | Tensor) -> Tensor:
    """Elementwise ``sum_k alphas[k] * inputs[k]``.

    ``alphas`` is either a list of scalar tensors or one rank-1 tensor.
    """
    if not inputs:
        raise ValueError("weighted_sum needs at least one input")
    if isinstance(alphas, Tensor):
        alpha_tensors: tuple[Tensor, ...] = (alphas,)
        avals = alphas.data.reshape(-1)
        vector = True
    else:
        alpha_tensors = tuple(alphas)
        avals = np.array([a.data.reshape(()) for a in alpha_tensors], dtype=inputs[0].dtype)
        vector = False
    if len(avals) != len(inputs):
        raise ValueError(f"{len(inputs)} inputs but {len(avals)} weights")
    shape = inputs[0].shape
    for t in inputs:
        if t.shape != shape:
            raise ValueError(f"shape mismatch in weighted_sum: {t.shape} vs {shape}")
    xs = [t.data for t in inputs]
    out = avals[0] * xs[0]
    for a, x in zip(avals[1:], xs[1:]):
        out = out + a * x

    def back(g: np.ndarray):
        dx = [a * g for a in avals]
        da = np.array([np.sum(g * x, dtype=np.float64) for x in xs], dtype=g.dtype)
        if vector:
            return [*dx, da.reshape(alpha_tensors[0].shape)]
        return [*dx, *(d.reshape(a.shape) for d, a in zip(da, alpha_tensors))]

    return _emit(out, (*inputs, *alpha_tensors), back)


def take(t: Tensor, rows: Sequence[int] | np.ndarray, cols: Sequence[int] | np.ndarray) -> Tensor:
    """Gather ``t[rows[k], cols[k]]`` into a rank-1 tensor (scatter-add adjoint)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    value = t.data[rows, cols]

    def back(g: np.ndarray):
        full = np.zeros_like(t.data)
        np.add.at(full, (rows, cols), g)
        return [full]

    return _emit(value, (t,), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` of shape (batch, in) and ``w`` of shape (in, out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: x {x.shape}, W {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match W {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g: np.ndarray):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0, dtype=np.float64).astype(g.dtype))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, back)


_kink_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("_kink_log", default=None)


@contextlib.contextmanager
def record_kinks() -> Iterator[list[bytes]]:
    """Collect the activation pattern of every ReLU evaluated inside the block."""
    log: list[bytes] = []
    token = _kink_log.set(log)
    try:
        yield log
    finally:
        _kink_log.reset(token)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log = _kink_log.get()
    if log is not None:
        log.append(np.packbits(mask).tobytes())
    out = np.where(mask, x.data, np.zeros((), dtype=x.dtype))

    def back(g: np.ndarray):
        return [g * mask]

    return _emit(out, (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: [g, g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")
    return _emit(a.data * b.data, (a, b), lambda g: [g * b.data, g * a.data])


def sum_all(x: Tensor) -> Tensor:
    # scalar reductions stay in float64
    value = np.asarray(np.sum(x.data, dtype=np.float64))
    return _emit(value, (x,), lambda g: [np.broadcast_to(g, x.shape).astype(x.dtype)])


def add_scalar(x: Tensor, c: float) -> Tensor:
    """Shift by a constant; the adjoint passes through untouched."""
    value = x.data + np.asarray(c, dtype=np.float64)
    return _emit(value.astype(np.result_type(x.dtype, np.float64) if x.data.ndim == 0 else x.dtype), (x,), lambda g: [g])


def pad_cols(x: Tensor, width: int) -> Tensor:
    """Zero-pad features on the right up to ``width`` columns."""
    extra = width - x.shape[1]
    if extra < 0:
        raise ValueError(f"cannot pad {x.shape[1]} columns down to {width}")
    if extra == 0:
        return x
    out = np.concatenate([x.data, np.zeros((x.shape[0], extra), dtype=x.dtype)], axis=1)
    k = x.shape[1]
    return _emit(out, (x,), lambda g: [np.ascontiguousarray(g[:, :k])])


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, width: int, dtype=DEFAULT_DTYPE) -> RunningStats:
        return cls(np.zeros(width, dtype=dtype), np.ones(width, dtype=dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    state: RunningStats,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-column standardisation (biased variance) followed by ``scale * xhat + shift``.

    Train mode normalises with batch statistics and folds them into ``state``
    as ``state = momentum * state + (1 - momentum) * batch``; eval mode reads
    ``state`` only.
    """
    dtype = x.dtype
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        x64 = x.data.astype(np.float64)
        mean = x64.mean(axis=0)
        var = ((x64 - mean) ** 2).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat64 = (x64 - mean) * inv_std
        state.mean = (momentum * state.mean + (1.0 - momentum) * mean).astype(state.mean.dtype)
        state.var = (momentum * state.var + (1.0 - momentum) * var).astype(state.var.dtype)
        xhat = xhat64.astype(dtype)
        out = scale.data * xhat + shift.data

        def back(g: np.ndarray):
            g64 = g.astype(np.float64)
            gs = g64 * scale.data.astype(np.float64)
            dx = (inv_std / n) * (n * gs - gs.sum(axis=0) - xhat64 * (gs * xhat64).sum(axis=0))
            return [
                dx.astype(dtype),
                (g64 * xhat64).sum(axis=0).astype(dtype),
                g64.sum(axis=0).astype(dtype),
            ]

    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(state.var.astype(np.float64) + eps)).astype(dtype)
        xhat = (x.data - state.mean.astype(dtype)) * inv_std
        out = scale.data * xhat + shift.data

        def back(g: np.ndarray):
            return [
                g * scale.data * inv_std,
                (g * xhat).sum(axis=0, dtype=np.float64).astype(dtype),
                g.sum(axis=0, dtype=np.float64).astype(dtype),
            ]

    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return _emit(out.astype(dtype, copy=False), (x, scale, shift), back)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against targets ``(1 - s) * onehot + s / K``."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, k = logits.shape
    if labels.shape[0] != batch:
        raise ValueError(f"{labels.shape[0]} labels for batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - logsum
    target = np.full((batch, k), smoothing / k)
    target[np.arange(batch), labels] += 1.0 - smoothing
    loss = -(target * log_p).sum() / batch
    probs = np.exp(log_p)

    def back(g: np.ndarray):
        return [(float(g) * (probs - target) / batch).astype(logits.dtype)]

    return _emit(np.asarray(loss, dtype=np.float64), (logits,), back)


# -- verification -------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    kinks_skipped: int
    exhaustive_checked: int
    exhaustive_total: int


def grad_check_report(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-3,
    max_coords: int | None = 500,
    seed: int = 0,
    exhaustive: Sequence[Parameter] = (),
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``fn`` recomputes the scalar loss from the current parameter values.
    Every coordinate of ``exhaustive`` params is checked; the rest of the
    ``max_coords`` budget is sampled from ``params``. The finite difference
    divides by the actually representable step ``(w + eps) - (w - eps)``.

    With ``skip_kinks`` a coordinate whose perturbation flips any ReLU
    activation is not scored (the central difference there straddles a
    non-differentiable point) and the next sampled coordinate takes its place.
    """
    if not eps > 0:
        raise ValueError("invalid step: eps must be > 0")
    from .prng import Rng

    for p in params:
        p.zero_grad()
    with Tape() as tape, record_kinks() as base_pattern:
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in grad_check")
    tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    exhaustive_ids = {id(p) for p in exhaustive}
    forced = [(p, k) for p in params if id(p) in exhaustive_ids for k in range(p.data.size)]
    pool = [(p, k) for p in params if id(p) not in exhaustive_ids for k in range(p.data.size)]
    budget = len(pool) if max_coords is None else max(0, max_coords - len(forced))
    if budget >= len(pool):
        sampled, spare = pool, []
    else:
        order = Rng.derive(seed, "grad_check").permutation(len(pool))
        sampled = [pool[int(k)] for k in sorted(order[:budget])]
        spare = [pool[int(k)] for k in order[budget:]]

    def probe(p: Parameter, k: int) -> float | None:
        flat = p.data.reshape(-1)
        orig = flat[k].copy()
        with record_kinks() as pat_hi:
            flat[k] = orig + p.data.dtype.type(eps)
            hi_w = float(flat[k])
            f_hi = float(fn().data)
        with record_kinks() as pat_lo:
            flat[k] = orig - p.data.dtype.type(eps)
            lo_w = float(flat[k])
            f_lo = float(fn().data)
        flat[k] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise FloatingPointError(f"non-finite loss perturbing {p!r}[{k}]")
        if skip_kinks and (pat_hi != base_pattern or pat_lo != base_pattern):
            return None
        numeric = (f_hi - f_lo) / (hi_w - lo_w)
        a = float(analytic[id(p)].reshape(-1)[k])
        if not np.isfinite(a):
            raise FloatingPointError(f"non-finite analytic gradient at {p!r}[{k}]")
        return abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))

    worst = 0.0
    checked = skipped = forced_checked = 0
    for p, k in forced:
        err = probe(p, k)
        if err is None:
            skipped += 1
            continue
        worst = max(worst, err)
        checked += 1
        forced_checked += 1
    queue = list(sampled)
    spare_iter = iter(spare)
    while queue:
        p, k = queue.pop(0)
        err = probe(p, k)
        if err is None:
            skipped += 1
            nxt = next(spare_iter, None)
            if nxt is not None:
                queue.append(nxt)
            continue
        worst = max(worst, err)
        checked += 1
    return GradCheckReport(worst, checked, skipped, forced_checked, len(forced))


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-3,
    max_coords: int | None = 500,
    seed: int = 0,
    exhaustive: Sequence[Parameter] = (),
    skip_kinks: bool = False,
) -> float:
    """Max relative error between tape gradients and central differences."""
    return grad_check_report(fn, params, eps, max_coords, seed, exhaustive, skip_kinks).max_error
