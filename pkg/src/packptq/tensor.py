"""Dense float64 tensors with reverse-mode automatic differentiation.

Design constraints:
  - float64 everywhere; estimators downstream subtract nearly-equal losses
    and cannot afford float32 noise.
  - a tensor created by an op holds a backward closure; grad machinery is
    built only when some input is connected to a trainable leaf.
  - no broadcasting except bias_add; shape mismatches raise ShapeError
    naming the op and the shapes involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """N-dimensional float64 array, optionally tracked by the grad tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- internal constructor for op outputs -------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls(data)
        if any(p._tracked for p in parents):
            out._parents = parents
            out._backward = backward
        return out

    @property
    def _tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- sugar --------------------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis=axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis=axis)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward(g, a=a, b=b):
        if a._tracked:
            a.accumulate_grad(g)
        if b._tracked:
            b.accumulate_grad(g)

    return Tensor._from_op(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out_data = a.data - b.data

    def backward(g, a=a, b=b):
        if a._tracked:
            a.accumulate_grad(g)
        if b._tracked:
            b.accumulate_grad(-g)

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_data = a.data * b.data

    def backward(g, a=a, b=b):
        if a._tracked:
            a.accumulate_grad(g * b.data)
        if b._tracked:
            b.accumulate_grad(g * a.data)

    return Tensor._from_op(out_data, (a, b), backward)


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out_data = a.data * c

    def backward(g, a=a, c=c):
        if a._tracked:
            a.accumulate_grad(g * c)

    return Tensor._from_op(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g, a=a, b=b):
        if a._tracked:
            a.accumulate_grad(g @ b.data.T)
        if b._tracked:
            b.accumulate_grad(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward)


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis``; the only broadcasting op in the engine."""
    if b.data.ndim != 1:
        raise ShapeError(f"bias_add: bias must be 1-D, got {b.shape}")
    ax = axis % x.data.ndim
    if x.shape[ax] != b.shape[0]:
        raise ShapeError(
            f"bias_add: axis {ax} of {x.shape} does not match bias {b.shape}"
        )
    bshape = [1] * x.data.ndim
    bshape[ax] = b.shape[0]
    out_data = x.data + b.data.reshape(bshape)

    def backward(g, x=x, b=b, ax=ax):
        if x._tracked:
            x.accumulate_grad(g)
        if b._tracked:
            reduce_axes = tuple(i for i in range(g.ndim) if i != ax)
            b.accumulate_grad(g.sum(axis=reduce_axes))

    return Tensor._from_op(out_data, (x, b), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward(g, x=x):
        if x._tracked:
            x.accumulate_grad(g * (x.data > 0.0))

    return Tensor._from_op(out_data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * phi_cdf

    def backward(g, x=x, phi_cdf=phi_cdf):
        if x._tracked:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            x.accumulate_grad(g * (phi_cdf + x.data * pdf))

    return Tensor._from_op(out_data, (x,), backward)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """2-D convolution, stride 1, zero padding preserving spatial size.

    x: [B, C, H, W], w: [O, C, kh, kw] with odd kernel sides.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_data = np.zeros((bsz, cout, h, wd))
    for i in range(kh):
        for j in range(kw):
            out_data += np.einsum(
                "bchw,oc->bohw", xp[:, :, i : i + h, j : j + wd], w.data[:, :, i, j]
            )

    def backward(g, x=x, w=w, xp=xp, h=h, wd=wd, kh=kh, kw=kw, ph=ph, pw=pw):
        if x._tracked:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + h, j : j + wd] += np.einsum(
                        "bohw,oc->bchw", g, w.data[:, :, i, j]
                    )
            x.accumulate_grad(gxp[:, :, ph : ph + h, pw : pw + wd])
        if w._tracked:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.einsum(
                        "bohw,bchw->oc", g, xp[:, :, i : i + h, j : j + wd]
                    )
            w.accumulate_grad(gw)

    return Tensor._from_op(out_data, (x, w), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Row-wise cross entropy of softmax(logits) against integer labels.

    logits: [B, C]; labels: int array [B]. Returns per-row losses [B];
    reduce with mean() for the batch task loss.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: labels {labels.shape} do not match logits {logits.shape}"
        )
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = (z - zmax) - np.log(sez)
    rows = np.arange(z.shape[0])
    out_data = -log_probs[rows, labels]

    def backward(g, logits=logits, ez=ez, sez=sez, rows=rows, labels=labels):
        if logits._tracked:
            probs = ez / sez
            gl = probs * g[:, None]
            gl[rows, labels] -= g
            logits.accumulate_grad(gl)

    return Tensor._from_op(out_data, (logits,), backward)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out_data = np.asarray(x.data.sum(axis=axis))

    def backward(g, x=x, axis=axis):
        if x._tracked:
            if axis is None:
                x.accumulate_grad(np.broadcast_to(g, x.shape).copy())
            else:
                x.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return Tensor._from_op(out_data, (x,), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    out_data = np.asarray(x.data.mean(axis=axis))
    denom = x.data.size if axis is None else x.shape[axis]

    def backward(g, x=x, axis=axis, denom=denom):
        if x._tracked:
            if axis is None:
                x.accumulate_grad(np.broadcast_to(g / denom, x.shape).copy())
            else:
                x.accumulate_grad(
                    np.broadcast_to(np.expand_dims(g / denom, axis), x.shape).copy()
                )

    return Tensor._from_op(out_data, (x,), backward)


def frobenius_rows(x: Tensor) -> Tensor:
    """Per-sample Frobenius norm: flatten all but the first axis, return [B]."""
    if x.data.ndim < 2:
        raise ShapeError(f"frobenius_rows: need at least 2-D input, got {x.shape}")
    flat = x.data.reshape(x.shape[0], -1)
    out_data = np.sqrt((flat * flat).sum(axis=1))

    def backward(g, x=x, flat=flat, norms=out_data):
        if x._tracked:
            safe = np.where(norms > 0.0, norms, 1.0)
            gx = flat * (g / safe)[:, None]
            # zero subgradient at the (non-differentiable) origin
            gx[norms == 0.0] = 0.0
            x.accumulate_grad(gx.reshape(x.shape))

    return Tensor._from_op(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: list[Tensor] | None = None) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar loss.

    Populates ``.grad`` on every tracked tensor reachable from ``loss`` and
    returns a map ``id(param) -> grad Tensor`` for the requested params
    (zeros for params the loss never touched).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._backward is None and not loss._parents:
        raise NumericalError("backward called on a tensor with no recorded forward")

    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if params is None:
        params = [n for n in order if n.requires_grad]
    result: dict[int, Tensor] = {}
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        result[id(p)] = Tensor(g.copy())
    return result


def finite_diff_gradient(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x (the oracle path).

    Independent of the tape: calls f on perturbed copies only.
    """
    if h <= 0:
        raise ValueError("finite_diff_gradient: h must be positive")
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = _scalar_value(f(Tensor(xp.reshape(base.shape))))
        fm = _scalar_value(f(Tensor(xm.reshape(base.shape))))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(
                f"finite_diff_gradient: non-finite evaluation at coordinate {i}"
            )
        flat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


def _scalar_value(y) -> float:
    if isinstance(y, Tensor):
        return y.item()
    return float(y)


# ---------------------------------------------------------------------------
# composed graphs
# ---------------------------------------------------------------------------

@dataclass
class OpGraph:
    """A sequential composition of primitive ops over a batched input.

    Each step is a tuple ("op", *args). "residual" wraps a sub-list of steps
    whose output is added back to its input.
    """

    input_shape: tuple[int, ...]  # per-sample shape, excluding the batch axis
    steps: list[tuple] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []

        def collect(steps):
            for step in steps:
                if step[0] == "residual":
                    collect(step[1])
                else:
                    out.extend(a for a in step[1:] if isinstance(a, Tensor))

        collect(self.steps)
        return out


_UNARY = {"relu": relu, "gelu": gelu}


def _apply_steps(steps: list[tuple], x: Tensor) -> Tensor:
    for step in steps:
        name = step[0]
        if name in _UNARY:
            x = _UNARY[name](x)
        elif name == "matmul":
            x = matmul(x, step[1])
        elif name == "bias_add":
            axis = step[2] if len(step) > 2 else -1
            x = bias_add(x, step[1], axis=axis)
        elif name == "conv2d":
            x = conv2d(x, step[1])
        elif name == "mul":
            x = mul(x, step[1])
        elif name == "residual":
            x = add(x, _apply_steps(step[1], x))
        else:
            raise ShapeError(f"forward_eval: unknown op '{name}'")
    return x


def forward_eval(graph: OpGraph, x: Tensor) -> Tensor:
    """Evaluate a composed graph on a batched input [B, *input_shape]."""
    if tuple(x.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(
            f"forward_eval: input {x.shape} does not match declared "
            f"per-sample shape {graph.input_shape}"
        )
    out = _apply_steps(graph.steps, x)
    if not np.isfinite(out.data).all():
        raise NumericalError("forward_eval: non-finite values in graph output")
    return out
