"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the handful of primitives needed by the encoder, context and factor
networks are provided. Broadcasting is limited to adding a bias vector to
the rows of a matrix (or the last axis of a conv activation).
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "ssmn_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("value", "grad", "name", "requires_grad")

    def __init__(self, value, name: str | None = None, requires_grad: bool = False):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name or '<anon>'}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape})"

    # operator sugar; every path routes through the primitive catalog
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name: str) -> Tensor:
    return Tensor(value, name=name, requires_grad=True)


def const(value) -> Tensor:
    return Tensor(value)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    meta: dict = field(default_factory=dict)


class Tape:
    """Records primitive applications in execution order.

    Use as a context manager; ops evaluated while no tape is active are
    computed but not recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None
        self._spent = False

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] = ()) -> dict[str, np.ndarray]:
        """Propagate d(loss) back through the tape.

        Every tensor in ``params`` gets its ``grad`` slot overwritten with
        the gradient (zeros if unreachable). Returns ``{name: grad}``.
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._spent:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if not any(n.output is loss for n in self.nodes):
            raise ValueError("loss tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            needs = [t.requires_grad for t in node.inputs]
            if not any(needs):
                continue
            in_grads = _OPS[node.op].backward(g, node, needs)
            for t, gi, need in zip(node.inputs, in_grads, needs):
                if not need or gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise FloatingPointError(f"non-finite gradient flowing out of {node.op}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._spent = True
        items = params.items() if isinstance(params, Mapping) else ((p.name, p) for p in params)
        out = {}
        for name, p in items:
            g = grads.get(id(p))
            p.grad = np.zeros_like(p.value) if g is None else g.reshape(p.shape).copy()
            out[name] = p.grad
        return out

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from its inputs; returns the fresh outputs."""
        fresh: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            vals = [fresh.get(id(t), t.value) for t in node.inputs]
            value, _ = _OPS[node.op].forward(vals, node.meta)
            fresh[id(node.output)] = value
            outs.append(value)
        return outs

    def activation_signature(self) -> tuple:
        """Relu masks and pooling argmaxes; changes iff a kink was crossed."""
        sig = []
        for node in self.nodes:
            if node.op == "relu":
                sig.append((node.inputs[0].value > 0).tobytes())
            elif node.op == "maxpool2":
                sig.append(node.meta["argmax"].tobytes())
        return tuple(sig)


class no_tape:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


@dataclass(frozen=True)
class _OpDef:
    forward: Callable
    backward: Callable


_OPS: dict[str, _OpDef] = {}


def _register(name: str, forward: Callable, backward: Callable) -> None:
    _OPS[name] = _OpDef(forward, backward)


def _apply(op: str, inputs: Sequence[Tensor], meta: dict | None = None) -> Tensor:
    meta = dict(meta or {})
    value, extra = _OPS[op].forward([t.value for t in inputs], meta)
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced non-finite values")
    meta.update(extra)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.nodes.append(Node(op, tuple(inputs), out, meta))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_err(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


# --- elementwise arithmetic -------------------------------------------------

def _check_add(op, a, b):
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise _shape_err(op, a.shape, b.shape)


def _unbias(g, shape):
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def _add_fwd(v, meta):
    _check_add("add", v[0], v[1])
    return v[0] + v[1], {}


def _add_bwd(g, node, needs):
    return g, _unbias(g, node.inputs[1].shape)


def _sub_fwd(v, meta):
    _check_add("sub", v[0], v[1])
    return v[0] - v[1], {}


def _sub_bwd(g, node, needs):
    return g, -_unbias(g, node.inputs[1].shape)


def _mul_fwd(v, meta):
    if v[0].shape != v[1].shape:
        raise _shape_err("mul", v[0].shape, v[1].shape)
    return v[0] * v[1], {}


def _mul_bwd(g, node, needs):
    a, b = node.inputs
    return g * b.value, g * a.value


def _scale_fwd(v, meta):
    return v[0] * meta["c"], {}


def _scale_bwd(g, node, needs):
    return (g * node.meta["c"],)


_register("add", _add_fwd, _add_bwd)
_register("sub", _sub_fwd, _sub_bwd)
_register("mul", _mul_fwd, _mul_bwd)
_register("scale", _scale_fwd, _scale_bwd)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a bias vector matching ``a``'s last axis."""
    return _apply("add", [_as_tensor(a), _as_tensor(b)])


def sub(a, b) -> Tensor:
    return _apply("sub", [_as_tensor(a), _as_tensor(b)])


def mul(a, b) -> Tensor:
    return _apply("mul", [_as_tensor(a), _as_tensor(b)])


def scale(a, c: float) -> Tensor:
    return _apply("scale", [_as_tensor(a)], {"c": float(c)})


# --- linear algebra -----------------------------------------------------------

def _matmul_fwd(v, meta):
    a, b = v
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    return a @ b, {}


def _matmul_bwd(g, node, needs):
    a, b = node.inputs[0].value, node.inputs[1].value
    ga = gb = None
    if b.ndim == 1:
        if needs[0]:
            ga = np.outer(g, b)
        if needs[1]:
            gb = a.T @ g
    else:
        if needs[0]:
            ga = g @ b.T
        if needs[1]:
            gb = a.T @ g
    return ga, gb


def _dot_fwd(v, meta):
    a, b = v
    if a.ndim != 1 or a.shape != b.shape:
        raise _shape_err("dot", a.shape, b.shape)
    return np.asarray(a @ b, dtype=np.float64), {}


def _dot_bwd(g, node, needs):
    a, b = node.inputs
    return g * b.value, g * a.value


_register("matmul", _matmul_fwd, _matmul_bwd)
_register("dot", _dot_fwd, _dot_bwd)


def matmul(a, b) -> Tensor:
    return _apply("matmul", [_as_tensor(a), _as_tensor(b)])


def dot(a, b) -> Tensor:
    return _apply("dot", [_as_tensor(a), _as_tensor(b)])


# --- structural ops -------------------------------------------------------------

def _concat_fwd(v, meta):
    axis = meta["axis"]
    try:
        return np.concatenate(v, axis=axis), {}
    except ValueError:
        raise _shape_err("concat", *(x.shape for x in v)) from None


def _concat_bwd(g, node, needs):
    axis = node.meta["axis"]
    sizes = [t.shape[axis] for t in node.inputs]
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _take_fwd(v, meta):
    idx = meta["index"]
    if idx.size and (idx.min() < -v[0].shape[0] or idx.max() >= v[0].shape[0]):
        raise ShapeError(f"take: index out of range for axis 0 of {v[0].shape}")
    return v[0][idx], {}


def _take_bwd(g, node, needs):
    x = node.inputs[0]
    out = np.zeros_like(x.value)
    np.add.at(out, node.meta["index"], g)
    return (out,)


def _slice_fwd(v, meta):
    return v[0][meta["key"]].copy(), {}


def _slice_bwd(g, node, needs):
    out = np.zeros_like(node.inputs[0].value)
    out[node.meta["key"]] = g
    return (out,)


def _reshape_fwd(v, meta):
    try:
        return v[0].reshape(meta["shape"]), {}
    except ValueError:
        raise _shape_err("reshape", v[0].shape, meta["shape"]) from None


def _reshape_bwd(g, node, needs):
    return (g.reshape(node.inputs[0].shape),)


def _transpose_fwd(v, meta):
    if v[0].ndim != 2:
        raise _shape_err("transpose", v[0].shape)
    return v[0].T.copy(), {}


def _transpose_bwd(g, node, needs):
    return (g.T,)


_register("concat", _concat_fwd, _concat_bwd)
_register("transpose", _transpose_fwd, _transpose_bwd)
_register("take", _take_fwd, _take_bwd)
_register("slice", _slice_fwd, _slice_bwd)
_register("reshape", _reshape_fwd, _reshape_bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return _apply("concat", [_as_tensor(t) for t in tensors], {"axis": axis})


def take(a, index) -> Tensor:
    """Gather along axis 0 (repeated indices accumulate in backward)."""
    return _apply("take", [_as_tensor(a)], {"index": np.asarray(index, dtype=np.intp)})


def slice_(a, key) -> Tensor:
    return _apply("slice", [_as_tensor(a)], {"key": key})


def transpose(a) -> Tensor:
    return _apply("transpose", [_as_tensor(a)])


def reshape(a, shape) -> Tensor:
    return _apply("reshape", [_as_tensor(a)], {"shape": tuple(shape)})


# --- nonlinearities -------------------------------------------------------------

def _relu_fwd(v, meta):
    return np.maximum(v[0], 0.0), {}


def _relu_bwd(g, node, needs):
    return (g * (node.inputs[0].value > 0),)


def _tanh_fwd(v, meta):
    return np.tanh(v[0]), {}


def _tanh_bwd(g, node, needs):
    y = node.output.value
    return (g * (1.0 - y * y),)


def _sigmoid_fwd(v, meta):
    x = v[0]
    # two-sided form avoids exp overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), {}


def _sigmoid_bwd(g, node, needs):
    y = node.output.value
    return (g * y * (1.0 - y),)


def _softmax_fwd(v, meta):
    x = v[0]
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True), {}


def _softmax_bwd(g, node, needs):
    y = node.output.value
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(v, meta):
    x = v[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)), {}


def _log_softmax_bwd(g, node, needs):
    p = np.exp(node.output.value)
    return (g - p * g.sum(axis=-1, keepdims=True),)


def _log_fwd(v, meta):
    if np.any(v[0] <= 0):
        raise FloatingPointError("log of non-positive value")
    return np.log(v[0]), {}


def _log_bwd(g, node, needs):
    return (g / node.inputs[0].value,)


def _sum_fwd(v, meta):
    return np.asarray(v[0].sum(), dtype=np.float64), {}


def _sum_bwd(g, node, needs):
    return (np.full_like(node.inputs[0].value, float(g)),)


_register("relu", _relu_fwd, _relu_bwd)
_register("tanh", _tanh_fwd, _tanh_bwd)
_register("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
_register("softmax", _softmax_fwd, _softmax_bwd)
_register("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
_register("log", _log_fwd, _log_bwd)
_register("sum", _sum_fwd, _sum_bwd)


def relu(a) -> Tensor:
    return _apply("relu", [_as_tensor(a)])


def tanh(a) -> Tensor:
    return _apply("tanh", [_as_tensor(a)])


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", [_as_tensor(a)])


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    return _apply("softmax", [_as_tensor(a)])


def log_softmax(a) -> Tensor:
    return _apply("log_softmax", [_as_tensor(a)])


def log(a) -> Tensor:
    return _apply("log", [_as_tensor(a)])


def sum_(a) -> Tensor:
    return _apply("sum", [_as_tensor(a)])


# --- convolution and pooling (NHWC) --------------------------------------------

def _im2col(x, kh, kw):
    """(N, H, W, Cin) -> (N*H*W, Cin*kh*kw) patches for a same-padded conv."""
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win.reshape(-1, x.shape[3] * kh * kw)


def _conv_fwd(v, meta):
    x, w, b = v
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3] or b.shape != (w.shape[3],):
        raise _shape_err("conv2d", x.shape, w.shape, b.shape)
    kh, kw = w.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: odd kernel required, got {w.shape[:2]}")
    n, h, wd, _ = x.shape
    cols = _im2col(x, kh, kw)
    out = cols @ w.transpose(2, 0, 1, 3).reshape(-1, w.shape[3]) + b
    return out.reshape(n, h, wd, w.shape[3]), {"cols": cols}


def _conv_bwd(g, node, needs):
    x, w, b = (t.value for t in node.inputs)
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    gx = gw = gb = None
    g2 = g.reshape(-1, cout)
    if needs[1]:
        gw = (node.meta["cols"].T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
    if needs[0]:
        gcols = (g2 @ w.transpose(2, 0, 1, 3).reshape(-1, cout).T).reshape(n, h, wd, cin, kh, kw)
        gxp = np.zeros((n, h + 2 * ph, wd + 2 * pw, cin))
        for dy in range(kh):
            for dx in range(kw):
                gxp[:, dy:dy + h, dx:dx + wd, :] += gcols[..., dy, dx]
        gx = gxp[:, ph:ph + h, pw:pw + wd, :]
    if needs[2]:
        gb = g2.sum(axis=0)
    return gx, gw, gb


def _pool_windows(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    # last axis ordering (0,0),(0,1),(1,0),(1,1): ascending flat index
    return win.reshape(n, h // 2, w // 2, c, 4)


def _pool_fwd(v, meta):
    x = v[0]
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise _shape_err("maxpool2", x.shape)
    win = _pool_windows(x)
    arg = np.argmax(win, axis=-1)  # first maximum -> lowest flat index
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, {"argmax": arg}


def _pool_bwd(g, node, needs):
    x = node.inputs[0].value
    n, h, w, c = x.shape
    arg = node.meta["argmax"]
    win = np.zeros((n, h // 2, w // 2, c, 4))
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    gx = win.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
    return (gx,)


_register("conv2d", _conv_fwd, _conv_bwd)
_register("maxpool2", _pool_fwd, _pool_bwd)


def conv2d(x, w, b) -> Tensor:
    """Stride-1 'same' convolution. x: (N,H,W,Cin), w: (kh,kw,Cin,Cout)."""
    return _apply("conv2d", [_as_tensor(x), _as_tensor(w), _as_tensor(b)])


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2, ties to the lowest flat index."""
    return _apply("maxpool2", [_as_tensor(x)])


def forward_op(op_kind: str, inputs: Sequence, **metadata) -> Tensor:
    """Apply a primitive by name, e.g. ``forward_op("relu", [x])``."""
    if op_kind not in _OPS:
        raise KeyError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}")
    if op_kind == "take":
        metadata["index"] = np.asarray(metadata["index"], dtype=np.intp)
    return _apply(op_kind, [_as_tensor(t) for t in inputs], metadata)


def primitives() -> list[str]:
    return sorted(_OPS)


# --- finite differences ---------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped_kink: int


def finite_diff_check(
    fn: Callable[[], tuple[float, tuple]],
    tensors: Sequence[Tensor],
    analytic: Sequence[np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``fn`` re-evaluates the scalar objective from the current tensor values
    and returns ``(value, activation_signature)``. Coordinates where the
    signature differs between x-h, x and x+h straddle a relu/max-pool kink
    and are skipped. Relative error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    _, sig0 = fn()
    worst, checked, skipped = 0.0, 0, 0
    for t, a in zip(tensors, analytic):
        flat = t.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = np.asarray(a).reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            fp, sp = fn()
            flat[k] = orig - h
            fm, sm = fn()
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("objective not finite at perturbed point")
            if sp != sig0 or sm != sig0:
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            err = abs(a_flat[k] - num) / max(1e-8, abs(a_flat[k]) + abs(num))
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, skipped)


def scalar_fn_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                    x, h: float = 1e-5) -> float:
    """Max relative error of ``grad`` vs central differences of plain ``f``."""
    x = np.array(x, dtype=np.float64).reshape(-1)
    a = np.asarray(grad(x), dtype=np.float64).reshape(-1)
    worst = 0.0
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("objective not finite at perturbed point")
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(a[k] - num) / max(1e-8, abs(a[k]) + abs(num)))
    return worst
