"""Small reverse-mode autodiff core on float64 numpy arrays.

Ops executed while a :class:`Tape` is active are recorded on it; ``backward``
replays the tape in reverse.  Outside a tape the same ops simply compute values,
which keeps greedy decoding and sampling cheap.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


# Names of primitives whose backward pass is deliberately corrupted.  Only the
# gradcheck fault-injection path touches this.
FAULTS: set[str] = set()
FAULT_NAMES = ("cross_entropy", "lstm", "tanh")


def _fault(name: str, grad: np.ndarray) -> np.ndarray:
    if name in FAULTS:
        return grad * 1.01 + 1e-3
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Op:
    __slots__ = ("name", "inputs", "outputs", "backward")

    def __init__(self, name, inputs, outputs, backward):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of executed primitives."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.ops)


def _active() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _record(name: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward: Callable) -> None:
    tape = _active()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    tape.ops.append(_Op(name, tuple(inputs), tuple(outputs), backward))


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    for op in tape.ops:
        for out in op.outputs:
            out.grad = None
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops):
        gouts = [o.grad for o in op.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(op.outputs, gouts)]
        gins = op.backward(*gouts)
        for t, g in zip(op.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64)
            else:
                t.grad = t.grad + g


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-D operands act as row/column vectors."""
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        A, B = a.data, b.data
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:  # (m,k)@(k,) -> (m,)
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:  # (k,)@(k,n) -> (n,)
            return B @ g, np.outer(A, g)
        return g * B, g * A

    _record("matmul", (a, b), (out,), bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    _record("transpose", (a,), (out,), lambda g: (g.T,))
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record("reshape", (a,), (out,), lambda g: (g.reshape(a.shape),))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    _record("add", (a, b), (out,), lambda g: (g, g))
    return out


def add_n(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        raise ValueError("add_n of nothing")
    out = Tensor(np.sum([t.data for t in terms], axis=0))
    _record("add_n", tuple(terms), (out,), lambda g: tuple(g for _ in terms))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    _record("mul", (a, b), (out,), lambda g: (g * b.data, g * a.data))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    _record("scale", (a,), (out,), lambda g: (g * c,))
    return out


def tanh_op(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    _record("tanh", (x,), (out,), lambda g: (_fault("tanh", g * (1.0 - y * y)),))
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def exp_op(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    _record("exp", (x,), (out,), lambda g: (g * y,))
    return out


def sum_op(x: Tensor) -> Tensor:
    out = Tensor(np.array(x.data.sum()))
    _record("sum", (x,), (out,), lambda g: (np.full_like(x.data, float(g)),))
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    except ValueError as err:
        raise DimensionError(f"concat mismatch: {[p.shape for p in parts]}") from err
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    _record("concat", tuple(parts), (out,), lambda g: tuple(np.split(g, cuts, axis=axis)))
    return out


def stack(rows: Sequence[Tensor]) -> Tensor:
    out = Tensor(np.stack([r.data for r in rows]))
    _record("stack", tuple(rows), (out,), lambda g: tuple(g[i] for i in range(len(rows))))
    return out


def tile(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of a vector into an (n, d) matrix."""
    if x.data.ndim != 1:
        raise DimensionError(f"tile expects a vector, got {x.shape}")
    out = Tensor(np.tile(x.data, (n, 1)))
    _record("tile", (x,), (out,), lambda g: (g.sum(axis=0),))
    return out


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - (m + math.log(np.exp(z - m).sum()))


def softmax_op(x: Tensor) -> Tensor:
    if x.data.ndim != 1 or x.data.size == 0:
        raise ValueError(f"softmax needs a non-empty vector, got shape {x.shape}")
    y = _stable_softmax(x.data)
    out = Tensor(y)
    _record("softmax", (x,), (out,), lambda g: (y * (g - np.dot(g, y)),))
    return out


def log_softmax_op(x: Tensor) -> Tensor:
    if x.data.ndim != 1 or x.data.size == 0:
        raise ValueError(f"log_softmax needs a non-empty vector, got shape {x.shape}")
    y = _log_softmax(x.data)
    out = Tensor(y)
    p = np.exp(y)
    _record("log_softmax", (x,), (out,), lambda g: (g - p * g.sum(),))
    return out


def pick(x: Tensor, index: int) -> Tensor:
    if not 0 <= index < x.shape[0]:
        raise IndexError(f"index {index} out of range for length {x.shape[0]}")
    out = Tensor(np.array(x.data[index]))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    _record("pick", (x,), (out,), bwd)
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] as a scalar node."""
    k = logits.shape[0]
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    logp = _log_softmax(logits.data)
    out = Tensor(np.array(-logp[target]))

    def bwd(g):
        d = np.exp(logp)
        d[target] -= 1.0
        return (_fault("cross_entropy", d * g),)

    _record("cross_entropy", (logits,), (out,), bwd)
    return out


def embedding_lookup(table: Tensor, index: int) -> Tensor:
    v = table.shape[0]
    if not 0 <= index < v:
        raise IndexError(f"token id {index} out of range for vocabulary of {v}")
    out = Tensor(table.data[index].copy())

    def bwd(g):
        gt = np.zeros_like(table.data)
        gt[index] = g
        return (gt,)

    _record("embedding", (table,), (out,), bwd)
    return out


def lstm_cell_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate rows of ``W`` are laid out (input, forget, output, candidate).

    ``W`` has shape (4H, d_in + H) and multiplies the concatenation [x; h_prev].
    """
    H = h_prev.shape[0]
    if W.shape != (4 * H, x.shape[0] + H) or b.shape != (4 * H,) or c_prev.shape != (H,):
        raise DimensionError(
            f"lstm shapes: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, W {W.shape}, b {b.shape}"
        )
    xh = np.concatenate([x.data, h_prev.data])
    z = W.data @ xh + b.data
    i = sigmoid(z[:H])
    f = sigmoid(z[H:2 * H])
    o = sigmoid(z[2 * H:3 * H])
    cand = np.tanh(z[3 * H:])
    c = f * c_prev.data + i * cand
    tc = np.tanh(c)
    h_out = Tensor(o * tc)
    c_out = Tensor(c)

    def bwd(gh, gc):
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * cand * i * (1.0 - i),
            dc * c_prev.data * f * (1.0 - f),
            gh * tc * o * (1.0 - o),
            dc * i * (1.0 - cand * cand),
        ])
        dz = _fault("lstm", dz)
        dxh = W.data.T @ dz
        return dxh[: x.shape[0]], dxh[x.shape[0]:], dc * f, np.outer(dz, xh), dz

    _record("lstm", (x, h_prev, c_prev, W, b), (h_out, c_out), bwd)
    return h_out, c_out


# ------------------------------------------------------------ parameters


class ParamStore:
    """Named trainable tensors plus Adam moments and a step counter."""

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.entries.values())

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in self.entries.values() if t.grad is not None))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if max_norm > 0 and norm > max_norm:
            k = max_norm / (norm + 1e-12)
            for t in self.entries.values():
                if t.grad is not None:
                    t.grad *= k
        return norm

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.entries.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.entries.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise DimensionError(f"{name}: expected shape {t.shape}, got {arrays[name].shape}")
            t.data = np.array(arrays[name], dtype=np.float64)


def adam_step(store: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; grads are zeroed afterwards."""
    missing = [k for k, t in store.items() if t.grad is None]
    if missing:
        raise ValueError(f"parameters without gradients: {', '.join(missing)}")
    b1, b2 = betas
    store.step += 1
    bc1 = 1.0 - b1 ** store.step
    bc2 = 1.0 - b2 ** store.step
    for name, t in store.items():
        g = t.grad
        m, v = store.moments.get(name, (np.zeros_like(t.data), np.zeros_like(t.data)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        store.moments[name] = (m, v)
        t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        t.grad = np.zeros_like(t.data)


# ------------------------------------------------------------ verification


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error scaled by the larger tensor magnitude."""
    scale_ = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale_ == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale_


def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients of ``fn()`` against central differences.

    Returns max relative error per parameter (keyed by name, or position).
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    report = {}
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        report[p.name or str(k)] = rel_error(analytic, numeric)
    return report
