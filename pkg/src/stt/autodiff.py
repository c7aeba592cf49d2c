"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery for fully connected layers, LSTMs, softmax
cross-entropy, and cosine similarity: row-major numpy storage, an implicit
computation graph recorded through parent links, and a backward pass that
walks the graph in reverse topological order. float32 is the training
dtype; `verification_mode()` switches new tensors to float64 so finite
differences are quiet enough for tight gradient checks.

A graph and its tensors belong to one thread between construction and
backward; distinct graphs may run concurrently (all kernels are pure).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, GraphError, ShapeError

NORM_EPS = 1e-12  # norm floor below which normalization is refused

_default_dtype = np.float32
_debug_checks = False


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def verification_mode():
    """float64 tensors inside the block; used by gradient checking."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = prev


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every op output is scanned for NaN/Inf."""
    global _debug_checks
    _debug_checks = enabled


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes come out of the op
    functions below and remember their op kind, parents, and a closure
    that routes the output gradient to the parents. Gradients accumulate
    additively across multiple uses of the same node.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        if _debug_checks and not np.all(np.isfinite(self.data)):
            raise GraphError("non-finite values in leaf tensor")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(Graph.trace(self), self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


class Graph:
    """Topologically ordered view of the graph below a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # leaves first, root last

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        # Iterative DFS: deep LSTM chains overflow the recursion limit.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return Graph(order)


def backward(graph: Graph, loss: Tensor,
             leaves: Iterable[Tensor] | None = None) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Leaves passed explicitly but unreached by the loss get zero gradients.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward()
    if leaves is not None:
        for t in leaves:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor],
            backward_fn: Callable[[Tensor], None] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._op = op
    out._parents = tuple(parents)
    out._backward = (lambda: backward_fn(out)) if (backward_fn and out.requires_grad) else None
    if _debug_checks and not np.all(np.isfinite(data)):
        raise GraphError(f"non-finite values produced by op '{op}'")
    return out


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> bool:
    """Returns True when b broadcasts over a's leading batch dim."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == b.data.ndim + 1 and a.shape[1:] == b.shape:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                     "(only leading-batch broadcast is supported)")


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_elementwise("add", a, b)

    def _bw(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            g = out.grad.sum(axis=0) if broadcast else out.grad
            b.accumulate_grad(g)

    return _result(a.data + b.data, "add", (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_elementwise("mul", a, b)

    def _bw(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad * b.data)
        if b.requires_grad:
            g = out.grad * a.data
            b.accumulate_grad(g.sum(axis=0) if broadcast else g)

    return _result(a.data * b.data, "mul", (a, b), _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _bw(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ out.grad)

    return _result(a.data @ b.data, "matmul", (a, b), _bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def _bw(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad.T)

    return _result(a.data.T.copy(), "transpose", (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != axis and t.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(out: Tensor):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * len(ref)
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(out.grad[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   "concat", tensors, _bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis >= a.data.ndim or stop > a.shape[axis] or start < 0 or start >= stop:
        raise ShapeError(f"slice: range [{start}:{stop}) on axis {axis} invalid for shape {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def _bw(out: Tensor):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            a.accumulate_grad(g)

    return _result(a.data[idx].copy(), "slice", (a,), _bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def _bw(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    return _result(a.data.reshape(shape).copy(), "reshape", (a,), _bw)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup (embedding fetch). Gradient scatter-adds into the table."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got shape {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {table.shape[0]} rows")

    def _bw(out: Tensor):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, idx, out.grad)
            table.accumulate_grad(g)

    return _result(table.data[idx], "gather_rows", (table,), _bw)


def _unary(op: str, a: Tensor, value: np.ndarray,
           local_grad: Callable[[Tensor], np.ndarray]) -> Tensor:
    def _bw(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(out.grad * local_grad(out))

    return _result(value, op, (a,), _bw)


def tanh(a: Tensor) -> Tensor:
    return _unary("tanh", a, np.tanh(a.data), lambda out: 1.0 - out.data ** 2)


def sigmoid(a: Tensor) -> Tensor:
    v = 1.0 / (1.0 + np.exp(-a.data))
    return _unary("sigmoid", a, v, lambda out: out.data * (1.0 - out.data))


def relu(a: Tensor) -> Tensor:
    return _unary("relu", a, np.maximum(a.data, 0.0),
                  lambda out: (a.data > 0).astype(a.data.dtype))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    v = e / e.sum(axis=-1, keepdims=True)

    def _bw(out: Tensor):
        if a.requires_grad:
            # dL/dx = y * (g - sum(g*y)) rowwise
            dot = (out.grad * out.data).sum(axis=-1, keepdims=True)
            a.accumulate_grad(out.data * (out.grad - dot))

    return _result(v, "softmax", (a,), _bw)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    v = shifted - lse

    def _bw(out: Tensor):
        if a.requires_grad:
            soft = np.exp(v)
            a.accumulate_grad(out.grad - soft * out.grad.sum(axis=-1, keepdims=True))

    return _result(v, "log_softmax", (a,), _bw)


def sum_all(a: Tensor) -> Tensor:
    def _bw(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, out.grad))

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), "sum", (a,), _bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def _bw(out: Tensor):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, out.grad / n))

    return _result(np.asarray(a.data.mean(), dtype=a.data.dtype), "mean", (a,), _bw)


def scalar_mul(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _unary("scalar_mul", a, a.data * k,
                  lambda out: np.asarray(k, dtype=a.data.dtype))


def l2_normalize(a: Tensor) -> Tensor:
    """Unit-normalize a vector, or each row of a matrix, in L2 norm."""
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize: expected vector or matrix, got shape {a.shape}")
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateInputError("l2_normalize: input norm below 1e-12")
    v = a.data / norms

    def _bw(out: Tensor):
        if a.requires_grad:
            dot = (out.grad * out.data).sum(axis=-1, keepdims=True)
            a.accumulate_grad((out.grad - out.data * dot) / norms)

    return _result(v, "l2_normalize", (a,), _bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors, as a scalar tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: expected equal-length vectors, "
                         f"got {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateInputError("cosine_similarity: zero-norm input")
    c = float(a.data @ b.data / (na * nb))

    def _bw(out: Tensor):
        g = out.grad  # scalar
        if a.requires_grad:
            a.accumulate_grad(g * (b.data / (na * nb) - c * a.data / (na * na)))
        if b.requires_grad:
            b.accumulate_grad(g * (a.data / (na * nb) - c * b.data / (nb * nb)))

    return _result(np.asarray(c, dtype=a.data.dtype), "cosine_similarity", (a, b), _bw)


# ---------------------------------------------------------------------------
# dispatch + gradient checking

OP_KINDS = ("matmul", "add", "mul", "concat", "slice", "tanh", "sigmoid",
            "relu", "softmax", "log_softmax", "sum", "mean", "scalar_mul")

_DISPATCH: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_axis,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum_all,
    "mean": mean_all,
    "scalar_mul": scalar_mul,
    # internal extras, still gradient-checked
    "transpose": transpose,
    "reshape": reshape,
    "l2_normalize": l2_normalize,
    "cosine_similarity": cosine_similarity,
    "gather_rows": gather_rows,
}


def forward_op(kind: str, *inputs: Tensor, **params) -> Tensor:
    """Dispatch an op by kind name. Raises ShapeError on bad operands."""
    if kind not in _DISPATCH:
        raise ShapeError(f"unknown op kind '{kind}'")
    return _DISPATCH[kind](*inputs, **params)


def _gradcheck_instance(kind: str, shapes: Sequence[tuple[int, ...]], rng) -> float:
    """Max relative error between analytic and central-difference gradients."""
    # Keep magnitudes away from relu's kink and softmax saturation.
    inputs = [Tensor(rng.uniform(0.2, 1.2, size=s) * rng.choice([-1.0, 1.0], size=s),
                     requires_grad=True) for s in shapes]
    kwargs: dict = {}
    if kind == "slice":
        kwargs = {"axis": 0, "start": 0, "stop": max(1, shapes[0][0] - 1)}
    elif kind == "concat":
        kwargs = {"axis": 0}
    elif kind == "scalar_mul":
        kwargs = {"k": 1.7}
    elif kind == "reshape":
        kwargs = {"shape": (int(np.prod(shapes[0])),)}
    elif kind == "gather_rows":
        kwargs = {"indices": rng.integers(0, shapes[0][0], size=3)}

    out = forward_op(kind, *inputs, **kwargs)
    # Probe with a fixed random projection so the whole Jacobian is exercised.
    probe = rng.standard_normal(out.shape)

    def loss_value() -> float:
        args = [Tensor(t.data, requires_grad=False) for t in inputs]
        return float((forward_op(kind, *args, **kwargs).data * probe).sum())

    if out.shape == ():
        loss = scalar_mul(out, float(probe))
    else:
        loss = sum_all(mul(out, Tensor(probe)))
    loss.backward()

    h = 1e-5
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_value()
            flat[i] = orig - h
            f_minus = loss_value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


_GRADCHECK_SHAPES: dict[str, list[tuple[tuple[int, ...], ...]]] = {
    "matmul": [((2, 3), (3, 2)), ((4, 2), (2, 5))],
    "add": [((3, 4), (3, 4)), ((3, 4), (4,))],
    "mul": [((3, 4), (3, 4)), ((3, 4), (4,))],
    "concat": [((2, 3), (4, 3))],
    "slice": [((4, 3),)],
    "tanh": [((5,),), ((2, 3),)],
    "sigmoid": [((5,),)],
    "relu": [((5,),), ((2, 4),)],
    "softmax": [((3, 5),), ((4,),)],
    "log_softmax": [((3, 5),)],
    "sum": [((2, 3),)],
    "mean": [((2, 3),)],
    "scalar_mul": [((3, 2),)],
    "transpose": [((2, 4),)],
    "reshape": [((2, 3),)],
    "l2_normalize": [((5,),), ((3, 4),)],
    "cosine_similarity": [((4,), (4,))],
    "gather_rows": [((5, 3),)],
}


def grad_check(kind: str, shapes: Sequence[tuple[int, ...]] | None = None,
               tolerance: float = 1e-6, instances: int = 20,
               seed: int = 0) -> dict:
    """Compare analytic gradients against central finite differences.

    Runs in float64 (verification mode) with step 1e-5. Relative error uses
    an absolute floor of 1 so near-zero gradients are judged absolutely.
    Returns {"kind", "max_rel_err", "pass"}.
    """
    shape_sets = [tuple(shapes)] if shapes is not None else _GRADCHECK_SHAPES[kind]
    worst = 0.0
    with verification_mode():
        rng = np.random.default_rng(seed)
        for _ in range(instances):
            for shape_set in shape_sets:
                worst = max(worst, _gradcheck_instance(kind, shape_set, rng))
    return {"kind": kind, "max_rel_err": worst, "pass": worst < tolerance}


def check_function(fn: Callable[..., Tensor], inputs: list[Tensor],
                   tolerance: float = 1e-5) -> dict:
    """Finite-difference check of an arbitrary scalar-valued tensor function.

    ``inputs`` must be float64 leaves with requires_grad set; ``fn`` is
    re-evaluated on perturbed copies, so it must be pure.
    """
    loss = fn(*inputs)
    if loss.size != 1:
        raise GraphError("check_function requires a scalar-valued function")
    loss.backward()

    def value() -> float:
        args = [Tensor(t.data, requires_grad=False, dtype=np.float64) for t in inputs]
        return fn(*args).item()

    h = 1e-5
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = value()
            flat[i] = orig - h
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            worst = max(worst, err)
    return {"max_rel_err": worst, "pass": worst < tolerance}


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
