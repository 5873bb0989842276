"""Dense 4-D tensors with a reverse-mode autodiff tape.

Every array in this package is float64 with a fixed (N, C, H, W) layout:
batch, channels, height, width. Scalars live in shape (1, 1, 1, 1) and
lower-rank data is embedded explicitly (a weight matrix is a 4-D kernel,
a per-channel parameter is (1, C, 1, 1)). Keeping one layout removes a
whole class of broadcasting surprises from the normalization code.

Gradients are computed by recording every op on an explicit tape and
walking it backwards exactly once. Ops executed outside a `with Tape()`
block are eager and record nothing, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "scalar",
    "from_grid",
    "to_grid",
    "record",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "sigmoid",
    "reduce_sum",
    "moments",
    "gradcheck",
    "PARTITIONS",
]

# Reduction axes per named partition. "group" is handled separately since
# its axes depend on the group count.
_PARTITION_AXES = {
    "batch": (0, 2, 3),
    "layer": (1, 2, 3),
    "instance": (2, 3),
    "all": (0, 1, 2, 3),
}

PARTITIONS = ("batch", "layer", "instance", "group", "all")


class Tensor:
    """A 4-D float64 array plus an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"tensors are (N, C, H, W); got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; scalars are allowed on either side.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Coerce scalars, (H, W) grids, or 4-D arrays into a Tensor."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    elif arr.ndim == 2:
        arr = arr.reshape(1, 1, *arr.shape)
    elif arr.ndim != 4:
        raise ValueError(f"cannot embed a {arr.ndim}-D array into (N, C, H, W)")
    return Tensor(arr, requires_grad)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad)


def from_grid(grid) -> Tensor:
    """Embed one (H, W) image as a (1, 1, H, W) tensor."""
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"from_grid wants (H, W), got shape {arr.shape}")
    return Tensor(arr.reshape(1, 1, *arr.shape))


def to_grid(t: Tensor) -> np.ndarray:
    if t.shape[0] != 1 or t.shape[1] != 1:
        raise ValueError(f"to_grid wants (1, 1, H, W), got {t.shape}")
    return t.data[0, 0]


# ---------------------------------------------------------------------------
# Tape machinery


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Records ops in execution order for one reverse sweep."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_LOCAL = threading.local()


def _stack() -> list:
    try:
        return _LOCAL.stack
    except AttributeError:
        _LOCAL.stack = []
        return _LOCAL.stack


def _active() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def record(output: Tensor, inputs: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    """Attach a node to the active tape if any input is being traced.

    `backward_fn(grad_out)` must return one gradient array (or None) per
    input, each already shaped like the matching input.
    """
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), output, backward_fn))
    return output


def backward(tape: Tape, loss: Tensor):
    """Walk the tape once in reverse, accumulating d(loss)/d(tensor).

    Gradients add up across fan-out and across repeated backward calls;
    callers reset `.grad` between steps.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise ValueError(f"loss must be scalar-shaped (1, 1, 1, 1), got {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        gout = grads.get(id(node.output))
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for inp, gin in zip(node.inputs, gins):
            if gin is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
                holders[key] = inp
    for key, t in holders.items():
        if t.requires_grad:
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise ops


def _check_broadcast(a_shape, b_shape, opname):
    for da, db in zip(a_shape, b_shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(
                f"{opname}: shapes {a_shape} and {b_shape} are not broadcast-compatible"
            )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to `shape` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data + float(b))
        return record(out, (a,), lambda g: (g,))
    _check_broadcast(a.shape, b.shape, "add")
    out = Tensor(a.data + b.data)
    return record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data - float(b))
        return record(out, (a,), lambda g: (g,))
    _check_broadcast(a.shape, b.shape, "sub")
    out = Tensor(a.data - b.data)
    return record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data * s)
        return record(out, (a,), lambda g: (g * s,))
    _check_broadcast(a.shape, b.shape, "mul")
    out = Tensor(a.data * b.data)
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data / s)
        return record(out, (a,), lambda g: (g / s,))
    _check_broadcast(a.shape, b.shape, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    y = np.sqrt(a.data)
    out = Tensor(y)
    return record(out, (a,), lambda g: (g * 0.5 / y,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return record(out, (a,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# Reductions


def _group_layout(shape, groups, opname):
    n, c, h, w = shape
    if groups is None:
        raise ValueError(f"{opname}: partition 'group' needs a group count")
    if groups < 1 or c % groups != 0:
        raise ValueError(f"{opname}: {groups} groups do not divide {c} channels")
    return n, c, h, w, c // groups


def reduce_sum(x: Tensor, partition: str, groups: int | None = None) -> Tensor:
    """Sum over one partition's cells.

    Output keeps reduced axes at size 1. The group partition returns one
    cell per (sample, group) as an (N, G, 1, 1) tensor; unlike `moments`
    it does not repeat values across each group's channels, so its
    backward pass is exactly a broadcast of the incoming gradient.
    """
    if partition == "group":
        n, c, h, w, cpg = _group_layout(x.shape, groups, "reduce_sum")
        y = x.data.reshape(n, groups, cpg, h, w).sum(axis=(2, 3, 4)).reshape(n, groups, 1, 1)
        out = Tensor(y)

        def bwd(g):
            rep = np.repeat(g, cpg, axis=1)
            return (np.broadcast_to(rep, x.shape).copy(),)

        return record(out, (x,), bwd)
    axes = _PARTITION_AXES.get(partition)
    if axes is None:
        raise ValueError(f"reduce_sum: unknown partition {partition!r}")
    y = x.data.sum(axis=axes, keepdims=True)
    out = Tensor(y)
    return record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def moments(x: Tensor, partition: str, groups: int | None = None) -> tuple[Tensor, Tensor]:
    """Population mean and variance over a partition's cells.

    Both outputs are shaped to broadcast straight back against x:
    batch -> (1, C, 1, 1), layer -> (N, 1, 1, 1), instance -> (N, C, 1, 1),
    group -> (N, C, 1, 1) with each group's statistic repeated across its
    channels. Variance divides by the cell count, not count-1.
    """
    if partition == "group":
        n, c, h, w, cpg = _group_layout(x.shape, groups, "moments")
        if h * w * cpg == 0:
            raise ValueError("moments: empty partition cell")
        xg = x.data.reshape(n, groups, cpg, h, w)
        mean_g = xg.mean(axis=(2, 3, 4))  # (N, G)
        var_g = ((xg - mean_g[:, :, None, None, None]) ** 2).mean(axis=(2, 3, 4))
        count = cpg * h * w
        mean_full = np.repeat(mean_g, cpg, axis=1).reshape(n, c, 1, 1)
        var_full = np.repeat(var_g, cpg, axis=1).reshape(n, c, 1, 1)
        mean_t, var_t = Tensor(mean_full), Tensor(var_full)

        def sum_per_group(g):
            return g.reshape(n, groups, cpg).sum(axis=2)  # (N, G)

        def bwd_mean(g):
            per = np.repeat(sum_per_group(g), cpg, axis=1).reshape(n, c, 1, 1)
            return (np.broadcast_to(per / count, x.shape).copy(),)

        def bwd_var(g):
            per = np.repeat(sum_per_group(g), cpg, axis=1).reshape(n, c, 1, 1)
            return (per * 2.0 * (x.data - mean_full) / count,)

        record(mean_t, (x,), bwd_mean)
        record(var_t, (x,), bwd_var)
        return mean_t, var_t

    axes = _PARTITION_AXES.get(partition)
    if axes is None or partition == "all":
        raise ValueError(f"moments: unknown partition {partition!r}")
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    if count == 0:
        raise ValueError("moments: empty partition cell")
    mean = x.data.mean(axis=axes, keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=axes, keepdims=True)
    mean_t, var_t = Tensor(mean), Tensor(var)

    def bwd_mean(g):
        return (np.broadcast_to(g / count, x.shape).copy(),)

    def bwd_var(g):
        return (g * 2.0 * (x.data - mean) / count,)

    record(mean_t, (x,), bwd_mean)
    record(var_t, (x,), bwd_var)
    return mean_t, var_t


# ---------------------------------------------------------------------------
# Gradient checking


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6,
              weight_seed: int = 0) -> float:
    """Max relative error between taped and central-difference gradients.

    f is reduced to a scalar through a fixed random weighting of its
    output, so permuted or misplaced gradient entries cannot cancel out.
    f must be deterministic; x is nudged in place for the numeric side.
    Relative error uses |a - n| / max(1e-8, |a| + |n|) per coordinate.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
        w = np.random.default_rng(weight_seed).uniform(0.5, 1.5, y.shape)
        loss = reduce_sum(mul(y, Tensor(w)), "all")
    if not np.isfinite(loss.data).all():
        raise ValueError("gradcheck: non-finite loss in analytic pass")
    backward(tape, loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    def score() -> float:
        return float((f(x).data * w).sum())

    worst = 0.0
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        sp = score()
        flat[i] = orig - h
        sm = score()
        flat[i] = orig
        if not (np.isfinite(sp) and np.isfinite(sm)):
            raise ValueError(f"gradcheck: non-finite output at coordinate {i}")
        numeric = (sp - sm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if rel > worst:
            worst = rel
    return worst
