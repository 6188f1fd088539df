"""Dense float64 kernels with tape-based reverse-mode differentiation.

Every kernel accepts plain ``numpy`` arrays or :class:`Tensor` nodes. When
none of the inputs is a ``Tensor`` the kernel is a pure numpy function and
returns an array; otherwise the result is a ``Tensor`` recorded on the
inputs' :class:`Tape` together with its vector-Jacobian product.

    tape = Tape()
    w = tape.param("w", np.ones((2, 3)))
    loss = sum_all(mul(w, w))
    grads = backward(tape, loss)   # {"w": 2 * w}
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

DTYPE = np.float64


class Tensor:
    __slots__ = ("value", "tape", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", name: str | None = None):
        self.value = value
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of executed kernels. Not thread-safe; use one per thread."""

    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice on this tape")
        arr = np.array(value, dtype=DTYPE)
        _check_finite(arr, f"param:{name}")
        t = Tensor(arr, self, name)
        self.params[name] = t
        return t

    def record(self, out: Tensor, inputs: tuple, vjp, op: str) -> None:
        self.nodes.append(_Node(out, inputs, vjp, op))


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {op}")


def _emit(value: np.ndarray, inputs: tuple, vjp, op: str):
    _check_finite(value, op)
    tape = None
    for x in inputs:
        if isinstance(x, Tensor):
            tape = x.tape
            break
    if tape is None:
        return value
    out = Tensor(value, tape)
    tape.record(out, inputs, vjp, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _emit(out, (a, b), vjp, "matmul")


def transpose(x):
    """Swap the last two axes."""
    out = np.swapaxes(value_of(x), -1, -2)
    return _emit(out, (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(xv.shape),), "reshape")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)), "add")


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)), "sub")


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _emit(
        out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul"
    )


def scale(x, c: float):
    out = value_of(x) * c
    return _emit(out, (x,), lambda g: (g * c,), "scale")


def tanh_map(x):
    y = np.tanh(value_of(x))
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x):
    xv = value_of(x)
    mask = xv > 0
    return _emit(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,), "relu")


def guarded_log(x, floor: float = 1e-30):
    """Natural log with inputs clamped below at ``floor``; clamped entries get zero gradient."""
    xv = value_of(x)
    clamped = xv < floor
    safe = np.where(clamped, floor, xv)
    return _emit(np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),), "log")


# ---------------------------------------------------------------- reductions


def _norm_axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if not axes:
        raise ContractError("reduction over an empty axis set")
    return axes


def sum_axes(x, axes=None, keepdims: bool = False):
    xv = value_of(x)
    ax = _norm_axes(xv.ndim, axes)
    out = xv.sum(axis=ax, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _emit(out, (x,), vjp, "sum")


def sum_all(x):
    return sum_axes(x, None)


def mean_axes(x, axes=None, keepdims: bool = False):
    xv = value_of(x)
    ax = _norm_axes(xv.ndim, axes)
    n = math.prod(xv.shape[a] for a in ax)
    return scale(sum_axes(x, ax, keepdims), 1.0 / n)


def max_axis(x, axis: int):
    """Maximum along one axis; the subgradient goes to the lowest index among ties."""
    xv = value_of(x)
    axis = axis % xv.ndim
    idx = np.argmax(xv, axis=axis)
    out = np.take_along_axis(xv, np.expand_dims(idx, axis), axis).squeeze(axis)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return _emit(out, (x,), vjp, "max")


def pick(x, index):
    """Select ``x[..., index[...]]`` along the last axis."""
    xv = value_of(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != xv.shape[:-1]:
        raise DimensionError(f"pick index shape {idx.shape} does not match {xv.shape[:-1]}")
    if np.any(idx < 0) or np.any(idx >= xv.shape[-1]):
        raise ContractError(f"pick index out of range [0, {xv.shape[-1]})")
    out = np.take_along_axis(xv, idx[..., None], -1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, idx[..., None], g[..., None], -1)
        return (gx,)

    return _emit(out, (x,), vjp, "pick")


def stable_softmax(x, axes=-1):
    """Softmax normalized jointly over ``axes``, computed with max-subtraction."""
    xv = value_of(x)
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        raise ContractError("softmax over an empty axis set")
    ax = _norm_axes(xv.ndim, axes)
    z = xv - xv.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _emit(y, (x,), vjp, "softmax")


def log_softmax(x, axes=-1):
    xv = value_of(x)
    ax = _norm_axes(xv.ndim, axes)
    z = xv - xv.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def vjp(g):
        return (g - y * g.sum(axis=ax, keepdims=True),)

    return _emit(out, (x,), vjp, "log_softmax")


# ---------------------------------------------------------------- convolution


def conv2d(x, kernel, bias, padding: int):
    """Stride-1 2-D convolution on NHWC input with a (k, k, Cin, Cout) kernel."""
    xv, kv, bv = value_of(x), value_of(kernel), value_of(bias)
    if xv.ndim != 4 or kv.ndim != 4 or xv.shape[-1] != kv.shape[2]:
        raise DimensionError(f"conv2d shape mismatch: input {xv.shape}, kernel {kv.shape}")
    k = kv.shape[0]
    p = padding
    xp = np.pad(xv, ((0, 0), (p, p), (p, p), (0, 0))) if p else xv
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    out = np.einsum("bhwcij,ijco->bhwo", win, kv, optimize=True) + bv
    ho, wo = out.shape[1], out.shape[2]

    def vjp(g):
        gk = np.einsum("bhwcij,bhwo->ijco", win, g, optimize=True)
        gb = g.sum(axis=(0, 1, 2))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + ho, j : j + wo, :] += g @ kv[i, j].T
        gx = gxp[:, p : p + xv.shape[1], p : p + xv.shape[2], :] if p else gxp
        return gx, gk, gb

    return _emit(out, (x, kernel, bias), vjp, "conv2d")


def maxpool2x2(x):
    """2x2 stride-2 max-pool on NHWC input; ties go to the first row-major cell."""
    xv = value_of(x)
    b, h, w, c = xv.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    blocks = xv.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], -1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], -1)
        gx = gb.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)
        return (gx,)

    return _emit(out, (x,), vjp, "maxpool2x2")


# ---------------------------------------------------------------- backward pass


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter registered on ``tape``.

    Parameters that do not influence the loss receive exact zeros.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise ContractError("loss must be a Tensor recorded on the given tape")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not isinstance(inp, Tensor) or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for name, t in tape.params.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.value) if g is None else np.asarray(g, dtype=DTYPE).reshape(t.value.shape)
    return out


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: bool
    step: float
    tolerance: float
    failures: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "step": self.step,
            "tolerance": self.tolerance,
            "worst": self.worst,
            "max_rel_error": dict(self.max_rel_error),
            "failures": list(self.failures),
        }


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def grad_check(
    fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    *,
    projection_threshold: int = 10_000,
    n_projections: int = 32,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients from ``fn`` against central differences.

    ``fn(params)`` returns ``(loss, grads)``. Tensors larger than
    ``projection_threshold`` are checked along ``n_projections`` random unit
    directions instead of coordinate by coordinate.
    """
    params = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    _, analytic = fn(params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport({}, True, step, tolerance)

    def f_at(name, delta):
        shifted = dict(params)
        shifted[name] = params[name] + delta
        loss, _ = fn(shifted)
        return float(loss)

    for name, p in params.items():
        ga = np.asarray(analytic[name], dtype=DTYPE)
        worst = 0.0
        try:
            if p.size > projection_threshold:
                for _ in range(n_projections):
                    d = rng.standard_normal(p.shape)
                    d /= np.linalg.norm(d)
                    num = (f_at(name, step * d) - f_at(name, -step * d)) / (2 * step)
                    worst = max(worst, float(relative_error(np.sum(ga * d), num)))
            else:
                for idx in np.ndindex(p.shape):
                    e = np.zeros_like(p)
                    e[idx] = step
                    lp, lm = f_at(name, e), f_at(name, -e)
                    if not (math.isfinite(lp) and math.isfinite(lm)):
                        raise NumericalError(f"non-finite loss at {name}{list(idx)}")
                    num = (lp - lm) / (2 * step)
                    worst = max(worst, float(relative_error(ga[idx], num)))
        except NumericalError as exc:
            report.failures.append(str(exc))
            worst = math.inf
        report.max_rel_error[name] = worst
        if not worst <= tolerance:
            report.passed = False
    return report


def value_and_grad(build: Callable[[Tape, dict[str, Tensor]], Tensor]):
    """Wrap ``build(tape, param_tensors) -> scalar loss`` into the ``fn`` shape ``grad_check`` expects."""

    def fn(params):
        tape = Tape()
        tensors = {k: tape.param(k, v) for k, v in params.items()}
        loss = build(tape, tensors)
        return float(loss.value), backward(tape, loss)

    return fn
