"""Dense float64 tensors with reverse-mode differentiation.

Every downstream module builds on the `Tensor` graph defined here. The
independent verification path is `grad_check`, which compares backprop
gradients against central finite differences and never touches the
backward closures it is checking.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np


class NumkitError(Exception):
    """Base error for tensor-level failures."""


class ShapeError(NumkitError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(NumkitError):
    """A NaN or Inf crossed an op boundary."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # cheap first pass: a NaN/Inf anywhere poisons the sum; the precise pass
    # rules out overflow-of-the-sum false alarms before raising
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Data is treated as immutable after construction; only `grad`
    accumulates. Ops are module-level functions returning new tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse sweep from a scalar node, accumulating into `.grad`."""
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # operator sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    """Wrap an op result. Graph edges only exist when gradients are live."""
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, op)
    out.data = arr
    out.grad = None
    out._backward = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    else:
        out.requires_grad = False
        out._parents = ()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A graph constant: participates in ops, receives no gradient."""
    return Tensor(x, requires_grad=False)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        out = _node(a.data + b, (a,), "add")
        if out._parents:
            def _bw():
                if a.requires_grad:
                    a.grad += _unbroadcast(out.grad, a.shape)
            out._backward = _bw
        return out
    out = _node(a.data + b.data, (a, b), "add")
    if out._parents:
        def _bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.shape)
        out._backward = _bw
    return out


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    out = _node(-a.data, (a,), "neg")
    if out._parents:
        def _bw():
            a.grad -= out.grad
        out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with numpy broadcasting on either operand."""
    if isinstance(b, (int, float)):
        out = _node(a.data * b, (a,), "mul")
        if out._parents:
            def _bw():
                a.grad += _unbroadcast(out.grad * b, a.shape)
            out._backward = _bw
        return out
    out = _node(a.data * b.data, (a, b), "mul")
    if out._parents:
        def _bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.shape)
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out._parents:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g
        out._backward = _bw
    return out


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt shape mismatch: {a.shape} x {b.shape}^T")
    out = _node(a.data @ b.data.T, (a, b), "matmul_nt")
    if out._parents:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += g @ b.data
            if b.requires_grad:
                b.grad += g.T @ a.data
        out._backward = _bw
    return out


def matmul_tn(a: Tensor, b: Tensor) -> Tensor:
    """a.T @ b without materializing the transpose."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_tn shape mismatch: {a.shape}^T x {b.shape}")
    out = _node(a.data.T @ b.data, (a, b), "matmul_tn")
    if out._parents:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += b.data @ g.T
            if b.requires_grad:
                b.grad += a.data @ g
        out._backward = _bw
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    out = _node(a.data.T.copy(), (a,), "transpose")
    if out._parents:
        def _bw():
            a.grad += out.grad.T
        out._backward = _bw
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _node(a.data.reshape(shape).copy(), (a,), "reshape")
    if out._parents:
        def _bw():
            a.grad += out.grad.reshape(a.shape)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _node(y, (a,), "tanh")
    if out._parents:
        def _bw():
            a.grad += out.grad * (1.0 - y * y)
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    out = _node(np.maximum(a.data, 0.0), (a,), "relu")
    if out._parents:
        mask = a.data > 0.0
        def _bw():
            a.grad += out.grad * mask
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # exp overflow saturates to exactly 0.0
        y = 1.0 / (1.0 + np.exp(-a.data))
    out = _node(y, (a,), "sigmoid")
    if out._parents:
        def _bw():
            a.grad += out.grad * y * (1.0 - y)
        out._backward = _bw
    return out


_ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(a)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow -> inf -> NonFiniteError below
        y = np.exp(a.data)
    out = _node(y, (a,), "exp")
    if out._parents:
        def _bw():
            a.grad += out.grad * y
        out._backward = _bw
    return out


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; `floor` clamps the argument to avoid -inf on saturation."""
    x = a.data if floor is None else np.maximum(a.data, floor)
    with np.errstate(divide="ignore", invalid="ignore"):  # -> NonFiniteError below
        y = np.log(x)
    out = _node(y, (a,), "log")
    if out._parents:
        if floor is None:
            def _bw():
                a.grad += out.grad / a.data
        else:
            live = a.data > floor
            def _bw():
                a.grad += np.where(live, out.grad / np.maximum(a.data, floor), 0.0)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------


def softmax_axis(a: Tensor, axis: str) -> Tensor:
    """Stable softmax along rows (each row sums to 1) or cols (each column)."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_axis needs a matrix, got shape {a.shape}")
    if axis == "rows":
        ax = 1
    elif axis == "cols":
        ax = 0
    else:
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=ax, keepdims=True)
    out = _node(p, (a,), "softmax_axis")
    if out._parents:
        def _bw():
            g = out.grad
            a.grad += p * (g - (g * p).sum(axis=ax, keepdims=True))
        out._backward = _bw
    return out


def normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit L2 norm."""
    if a.data.ndim != 2:
        raise ShapeError(f"normalize_rows needs a matrix, got shape {a.shape}")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ShapeError("cannot normalize a zero row")
    y = a.data / norms
    out = _node(y, (a,), "normalize_rows")
    if out._parents:
        def _bw():
            g = out.grad
            a.grad += (g - y * (g * y).sum(axis=1, keepdims=True)) / norms
        out._backward = _bw
    return out


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean, unit variance. Non-learnable."""
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise ShapeError(f"layer_norm needs a T x D matrix, got shape {a.shape}")
    d = a.shape[1]
    mean = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = _node(xc * inv, (a,), "layer_norm")
    if out._parents:
        def _bw():
            g = out.grad
            dvar = (g * xc).sum(axis=1, keepdims=True) * (-0.5) * inv ** 3
            dmean = -(g.sum(axis=1, keepdims=True)) * inv + dvar * (-2.0 / d) * xc.sum(
                axis=1, keepdims=True
            )
            a.grad += g * inv + dvar * (2.0 / d) * xc + dmean / d
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions and layout ops
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = _node(np.asarray(a.data.sum()), (a,), "sum_all")
    if out._parents:
        def _bw():
            a.grad += out.grad
        out._backward = _bw
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _node(np.asarray(a.data.sum() / n), (a,), "mean_all")
    if out._parents:
        def _bw():
            a.grad += out.grad / n
        out._backward = _bw
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"bad row slice [{start}:{stop}] for shape {a.shape}")
    out = _node(a.data[start:stop].copy(), (a,), "slice_rows")
    if out._parents:
        def _bw():
            a.grad[start:stop] += out.grad
        out._backward = _bw
    return out


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Concatenate along axis 0 (works for matrices and vectors alike)."""
    if not parts:
        raise ShapeError("concat_rows of an empty list")
    out = _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), "concat_rows")
    if out._parents:
        sizes = [p.shape[0] for p in parts]
        def _bw():
            at = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p.grad += out.grad[at:at + n]
                at += n
        out._backward = _bw
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of an empty list")
    out = _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat_cols")
    if out._parents:
        widths = [p.shape[1] for p in parts]
        def _bw():
            at = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p.grad += out.grad[:, at:at + w]
                at += w
        out._backward = _bw
    return out


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Each row repeated k times consecutively; adjoint of sum_row_groups."""
    out = _node(np.repeat(a.data, k, axis=0), (a,), "repeat_rows")
    if out._parents:
        def _bw():
            a.grad += out.grad.reshape(a.shape[0], k, -1).sum(axis=1).reshape(a.shape)
        out._backward = _bw
    return out


def sum_row_groups(a: Tensor, k: int) -> Tensor:
    """Sum each group of k consecutive rows down to one row."""
    t, rem = divmod(a.shape[0], k)
    if rem:
        raise ShapeError(f"row count {a.shape[0]} not divisible by group size {k}")
    out = _node(a.data.reshape(t, k, -1).sum(axis=1), (a,), "sum_row_groups")
    if out._parents:
        def _bw():
            a.grad += np.repeat(out.grad, k, axis=0).reshape(a.shape)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class ParamStore:
    """Ordered name -> trainable Tensor map; iteration order is insertion order.

    `finalize()` repacks all parameters into one contiguous data/grad arena
    so the optimizer and zero_grad work on flat vectors; tensor views stay
    valid because their arrays become slices of the arena.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._params: dict[str, Tensor] = {}
        self.flat_data: np.ndarray | None = None
        self.flat_grad: np.ndarray | None = None

    def create(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
               init: str = "xavier", fill: float = 0.0) -> Tensor:
        if self.flat_data is not None:
            raise ValueError("store is finalized; no new parameters")
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "xavier":
            data = xavier_uniform(shape, rng)
        elif init == "const":
            data = np.full(shape, fill, dtype=np.float64)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def put(self, name: str, data) -> Tensor:
        if self.flat_data is not None:
            raise ValueError("store is finalized; no new parameters")
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def finalize(self) -> None:
        if self.flat_data is not None:
            return
        total = self.n_entries()
        self.flat_data = np.empty(total)
        self.flat_grad = np.zeros(total)
        at = 0
        for t in self._params.values():
            n = t.data.size
            self.flat_data[at:at + n] = t.data.reshape(-1)
            t.data = self.flat_data[at:at + n].reshape(t.data.shape)
            t.grad = self.flat_grad[at:at + n].reshape(t.data.shape)
            at += n

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        if self.flat_grad is not None:
            self.flat_grad.fill(0.0)
        else:
            for t in self._params.values():
                t.zero_grad()

    def n_entries(self) -> int:
        return sum(t.data.size for t in self._params.values())


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class TensorCheck:
    name: str
    n_checked: int
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    checks: list[TensorCheck]

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def worst(self) -> TensorCheck:
        return max(self.checks, key=lambda c: c.max_rel_err)

    def format(self) -> str:
        lines = [f"{'tensor':<28} {'entries':>8} {'max rel err':>14}"]
        for c in self.checks:
            lines.append(f"{c.name:<28} {c.n_checked:>8} {c.max_rel_err:>14.3e}")
        lines.append(f"overall max rel err: {self.max_rel_err:.3e}")
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(loss_fn, params: ParamStore, eps: float = 1e-5,
               max_entries_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backprop gradients against central finite differences.

    `loss_fn` must be a deterministic scalar closure over `params`. Every
    entry of every parameter is perturbed by +-eps unless
    `max_entries_per_tensor` caps the sweep, in which case a seeded
    subsample of entries per tensor is checked instead (for models too
    large to sweep exhaustively).
    """
    params.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeError("loss_fn must return a scalar Tensor")
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss_fn returned a non-finite value")
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in params.items()}

    checks = []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_tensor is not None and n > max_entries_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries_per_tensor, replace=False)
        else:
            idxs = range(n)
        ana_flat = analytic[name].reshape(-1)
        worst = TensorCheck(name, 0, 0.0, (), 0.0, 0.0)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                f_minus = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = _rel_err(ana_flat[i], numeric)
            worst.n_checked += 1
            if err >= worst.max_rel_err:
                worst.max_rel_err = err
                worst.worst_index = np.unravel_index(i, t.shape)
                worst.analytic = float(ana_flat[i])
                worst.numeric = float(numeric)
        checks.append(worst)
    return GradCheckReport(checks)
