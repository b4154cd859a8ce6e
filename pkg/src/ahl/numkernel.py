"""Dense float64 tensors with reverse-mode gradients for a fixed layer set.

Everything runs in 64-bit and is deterministic: identical inputs produce
bitwise-identical outputs. The layer set is exactly what the heatmap
regressor and the policy controllers need — 2d cross-correlation, dense
layers, ReLU, 2x2 max-pooling, nearest-neighbour upsampling, (log-)softmax,
per-channel MSE — plus Adam and a central-finite-difference oracle used by
the test suite to cross-check every backward pass.

Gradient bookkeeping is a small tape: each operation records its parents
and a closure computing parent gradients from the output gradient;
``Tensor.backward()`` walks the tape in reverse topological order. Tensors
are treated as immutable after construction; parameter updates go through
``adam_step`` under an owning training context.
"""

from __future__ import annotations

import threading
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericalError

Array = np.ndarray

__all__ = [
    "AdamState",
    "Tensor",
    "adam_step",
    "add",
    "concat_channels",
    "conv2d",
    "finite_diff_grad",
    "gather_rows",
    "linear",
    "log_softmax",
    "matmul_const",
    "mean_all",
    "mse_per_channel",
    "mul",
    "mul_const",
    "no_grad",
    "pool_max2",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "sub_const",
    "sum_all",
    "tensor",
    "upsample_nearest2",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape construction on the current thread."""

    def __enter__(self) -> "no_grad":
        self._saved = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc) -> None:
        _state.grad_enabled = self._saved


def _require_finite(data: Array, op: str) -> None:
    # Fast path: a single reduction. Any NaN/Inf in the array forces the
    # sum to be non-finite (opposite infinities yield NaN), so this never
    # misses; overflow of the sum itself is impossible at working scales.
    if np.isfinite(data.sum()):
        return
    bad = np.argwhere(~np.isfinite(data))
    first = tuple(int(i) for i in bad[0]) if bad.size else ()
    raise NumericalError(f"{op}: non-finite value at index {first} (shape {data.shape})")


class Tensor:
    """A dense float64 array, optionally carrying gradient tape state."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data: Array,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], tuple[Array | None, ...]] | None = None,
        _op: str = "tensor",
    ) -> None:
        self.data = data
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        _require_finite(data, _op)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Accumulates gradients into ``.grad`` of every tensor on the tape
        that requires them.
        """
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pgrad
                else:
                    parent.grad = parent.grad + pgrad

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Construct a tensor from array-like data (copied, C-order float64)."""
    arr = np.array(data, dtype=np.float64, order="C")
    return Tensor(arr, requires_grad=requires_grad)


def _make(
    data: Array,
    parents: tuple[Tensor, ...],
    backward: Callable[[Array], tuple[Array | None, ...]],
    op: str,
) -> Tensor:
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    return _make(x.data + c, (x,), lambda g: (g,), "add_const")


def sub_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape not in ((), x.shape):
        raise DimensionError(f"sub_const: shape mismatch {x.shape} vs {c.shape}")
    return _make(x.data - c, (x,), lambda g: (g,), "sub_const")


def mul_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape not in ((), x.shape):
        raise DimensionError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return _make(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    data = np.ascontiguousarray(x.data).reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 0 for CHW, 1 for BCHW)."""
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise DimensionError(f"concat_channels: need matching 3d/4d, got {a.shape}, {b.shape}")
    axis = 0 if a.ndim == 3 else 1
    if a.shape[:axis] + a.shape[axis + 1:] != b.shape[:axis] + b.shape[axis + 1:]:
        raise DimensionError(f"concat_channels: shape mismatch {a.shape} vs {b.shape}")
    na = a.shape[axis]
    data = np.concatenate([a.data, b.data], axis=axis)

    def _bw(g: Array):
        if axis == 0:
            return g[:na], g[na:]
        return g[:, :na], g[:, na:]

    return _make(data, (a, b), _bw, "concat_channels")


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    data = np.asarray(x.data.sum() / n)
    return _make(data, (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean_all")


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())
    return _make(data, (x,), lambda g: (np.full(x.shape, float(g)),), "sum_all")


# ---------------------------------------------------------------------------
# Neural layers
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Dense layer y = W x + b; accepts a single vector or a batch of rows."""
    w, b = weights.data, bias.data
    if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
        raise DimensionError(f"linear: bad parameter shapes {w.shape}, {b.shape}")
    single = x.ndim == 1
    if x.data.shape[-1] != w.shape[1] or x.ndim not in (1, 2):
        raise DimensionError(f"linear: input {x.shape} does not conform to weights {w.shape}")
    xb = x.data[None, :] if single else x.data
    out = xb @ w.T + b

    def _bw(g: Array):
        gb2 = g[None, :] if single else g
        gx = gb2 @ w
        gw = gb2.T @ xb
        gbias = gb2.sum(axis=0)
        return (gx[0] if single else gx), gw, gbias

    return _make(out[0] if single else out, (x, weights, bias), _bw, "linear")


def _conv_out_extent(extent: int, k: int, stride: int, pad: int, what: str) -> int:
    span, rem = divmod(extent + 2 * pad - k, stride)
    if rem or span + 1 <= 0:
        raise ConfigurationError(
            f"conv2d: output {what} not a positive integer "
            f"(extent {extent}, k={k}, stride={stride}, pad={pad})"
        )
    return span + 1


def _pad_input(xb: Array, pad: int) -> Array:
    if not pad:
        return xb
    bs, c, h, w = xb.shape
    xp = np.zeros((bs, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = xb
    return xp


# Column chunks are sized to stay cache-resident; the working memory is
# (chunk rows) * Wo * C * k * k 64-bit values.
_CHUNK_BUDGET = 131072


def _row_chunks(ho: int, wo: int, ckk: int):
    rows = max(1, _CHUNK_BUDGET // max(1, ckk * wo))
    for r0 in range(0, ho, rows):
        yield r0, min(r0 + rows, ho)


def _fill_cols(buf: Array, xp: Array, k: int, stride: int, r0: int, r1: int,
               wo: int) -> Array:
    """im2col for output rows [r0, r1): (B, C*k*k, (r1-r0)*Wo)."""
    bs, c = xp.shape[:2]
    rows = r1 - r0
    view = buf[:, :, :rows * wo].reshape(bs, c, k, k, rows, wo)
    for a in range(k):
        for bb in range(k):
            view[:, :, a, bb] = xp[:, :, r0 * stride + a:(r1 - 1) * stride + a + 1:stride,
                                   bb:bb + (wo - 1) * stride + 1:stride]
    return buf[:, :, :rows * wo]


def _conv_gemm(xp: Array, w2d: Array, k: int, stride: int, ho: int, wo: int,
               out3: Array | None = None) -> Array:
    """Chunked im2col + batched GEMM: (B,C,Hp,Wp) -> (B,Co,Ho*Wo)."""
    bs, c = xp.shape[:2]
    cout = w2d.shape[0]
    if out3 is None:
        out3 = np.empty((bs, cout, ho * wo))
    if k == 1 and stride == 1:
        np.matmul(w2d, xp.reshape(bs, c, ho * wo), out=out3)
        return out3
    buf = np.empty((bs, c * k * k, min(ho, max(1, _CHUNK_BUDGET // max(1, c * k * k * wo))) * wo))
    for r0, r1 in _row_chunks(ho, wo, c * k * k):
        cols = _fill_cols(buf, xp, k, stride, r0, r1, wo)
        np.matmul(w2d, cols, out=out3[:, :, r0 * wo:r1 * wo])
    return out3


def _conv_grad_weights(xp: Array, g3: Array, k: int, stride: int, ho: int, wo: int,
                       cin: int) -> Array:
    """gw[co, ci*k*k] = sum over batch and positions of g * shifted input."""
    bs, cout = g3.shape[:2]
    if k == 1 and stride == 1:
        return np.matmul(g3, xp.reshape(bs, cin, ho * wo).transpose(0, 2, 1)).sum(axis=0)
    gw3 = np.zeros((bs, cout, cin * k * k))
    buf = np.empty((bs, cin * k * k,
                    min(ho, max(1, _CHUNK_BUDGET // max(1, cin * k * k * wo))) * wo))
    for r0, r1 in _row_chunks(ho, wo, cin * k * k):
        cols = _fill_cols(buf, xp, k, stride, r0, r1, wo)
        gw3 += np.matmul(g3[:, :, r0 * wo:r1 * wo], cols.transpose(0, 2, 1))
    return gw3.sum(axis=0)


def conv2d(
    x: Tensor,
    weights: Tensor,
    bias: Tensor,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2d cross-correlation over CHW or BCHW input.

    Lowered to batched GEMMs over row-chunked im2col buffers small enough
    to stay in cache (the full column matrix is never materialized). For
    unit stride the input gradient is itself a correlation — the output
    gradient against the channel-transposed, spatially flipped kernel;
    strided convolutions take an explicit column-scatter fallback.
    """
    w, b = weights.data, bias.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: weights must be (Cout,Cin,k,k), got {w.shape}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ConfigurationError(f"conv2d: kernel size must be odd, got {k}")
    if b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise DimensionError(f"conv2d: bias {b.shape} does not match weights {w.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: invalid stride={stride} pad={pad}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be CHW or BCHW, got {x.shape}")
    xb = x.data[None] if single else x.data
    bs, cin, h, wdt = xb.shape
    cout = w.shape[0]
    if cin != w.shape[1]:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {w.shape[1]}")
    ho = _conv_out_extent(h, k, stride, pad, "height")
    wo = _conv_out_extent(wdt, k, stride, pad, "width")
    xp = _pad_input(xb, pad)
    w2d = w.reshape(cout, cin * k * k)
    out3 = _conv_gemm(xp, w2d, k, stride, ho, wo)
    out3 += b[:, None]
    out = out3.reshape(bs, cout, ho, wo)

    def _bw(g: Array):
        gb4 = g[None] if single else g
        g3 = gb4.reshape(bs, cout, ho * wo)
        if weights.requires_grad:
            gbias = g3.sum(axis=(0, 2))
            gw = _conv_grad_weights(xp, g3, k, stride, ho, wo, cin).reshape(w.shape)
        else:
            gbias = gw = None
        if not x.requires_grad:
            return None, gw, gbias
        if stride == 1 and pad <= k - 1:
            wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gp = _pad_input(gb4, k - 1 - pad)
            gx = _conv_gemm(gp, wt.reshape(cin, cout * k * k), k, 1, h, wdt)
            gx = gx.reshape(bs, cin, h, wdt)
        else:
            gcols = np.matmul(w2d.T, g3)                     # (B, Cin*k*k, Ho*Wo)
            gc = gcols.reshape(bs, cin, k, k, ho, wo)
            gxp = np.zeros((bs, cin, h + 2 * pad, wdt + 2 * pad))
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] \
                        += gc[:, :, di, dj]
            gx = gxp[:, :, pad:pad + h, pad:pad + wdt] if pad else gxp
        return (gx[0] if single else gx), gw, gbias

    return _make(out[0] if single else out, (x, weights, bias), _bw, "conv2d")


def pool_max2(x: Tensor) -> Tensor:
    """2x2 max-pool halving H and W; gradient goes to the first maximal
    element of each window in row-major scan order."""
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"pool_max2: input must be CHW or BCHW, got {x.shape}")
    xb = x.data[None] if single else x.data
    bs, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"pool_max2: spatial extents must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = xb.reshape(bs, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bs, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _bw(g: Array):
        gb = g[None] if single else g
        gwin = np.zeros((bs, c, ho, wo, 4))
        np.put_along_axis(gwin, idx[..., None], gb[..., None], axis=-1)
        gx = gwin.reshape(bs, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bs, c, h, w)
        return (gx[0] if single else gx,)

    return _make(out[0] if single else out, (x,), _bw, "pool_max2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling doubling H and W."""
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"upsample_nearest2: input must be CHW or BCHW, got {x.shape}")
    xb = x.data[None] if single else x.data
    bs, c, h, w = xb.shape
    out = xb.repeat(2, axis=2).repeat(2, axis=3)

    def _bw(g: Array):
        gb = g[None] if single else g
        gx = gb.reshape(bs, c, h, 2, w, 2).sum(axis=(3, 5))
        return (gx[0] if single else gx,)

    return _make(out[0] if single else out, (x,), _bw, "upsample_nearest2")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g: Array):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), _bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def _bw(g: Array):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), _bw, "log_softmax")


def matmul_const(x: Tensor, m: Array) -> Tensor:
    """Right-multiply by a constant matrix: y = x @ m (m carries no grad)."""
    m = np.asarray(m, dtype=np.float64)
    if x.ndim != 2 or m.ndim != 2 or x.shape[1] != m.shape[0]:
        raise DimensionError(f"matmul_const: {x.shape} @ {m.shape} does not conform")
    return _make(x.data @ m, (x,), lambda g: (g @ m.T,), "matmul_const")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Pick one column per row: out[r] = x[r, idx[r]]."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"gather_rows: input {x.shape} vs indices {idx.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def _bw(g: Array):
        gx = np.zeros(x.shape)
        gx[rows, idx] = g
        return (gx,)

    return _make(out, (x,), _bw, "gather_rows")


def mse_per_channel(pred: Tensor, target) -> Tensor:
    """Per-channel mean squared error.

    For (N,H,W) input, entry i is the mean over H*W pixels of the squared
    difference on channel i; a (B,N,H,W) batch additionally averages over
    the batch axis. The target is a constant (no gradient flows into it).
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise DimensionError(f"mse_per_channel: shape mismatch {pred.shape} vs {tgt.shape}")
    if pred.ndim == 3:
        axes: tuple[int, ...] = (1, 2)
    elif pred.ndim == 4:
        axes = (0, 2, 3)
    else:
        raise DimensionError(f"mse_per_channel: input must be NHW or BNHW, got {pred.shape}")
    diff = pred.data - tgt
    count = diff.size // diff.shape[1 if pred.ndim == 4 else 0]
    out = (diff * diff).sum(axis=axes) / count

    def _bw(g: Array):
        if pred.ndim == 3:
            gfull = g[:, None, None]
        else:
            gfull = g[None, :, None, None]
        return (2.0 * diff * gfull / count,)

    return _make(out, (pred,), _bw, "mse_per_channel")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments; ``t`` counts applied steps."""

    m: Array
    v: Array
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Array, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   beta1=beta1, beta2=beta2, eps=eps)

    def clone(self) -> "AdamState":
        return AdamState(m=self.m.copy(), v=self.v.copy(), t=self.t,
                         beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def adam_step(params: Array, grads: Array, state: AdamState, lr: float) -> Array:
    """Standard Adam with bias correction; updates ``params`` in place.

    The caller owns both the parameter array and the state; shapes must
    match exactly and ``t`` increments by one per applied step.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionError(
            f"adam_step: shapes differ (params {params.shape}, grads {grads.shape}, "
            f"m {state.m.shape})"
        )
    if lr <= 0.0:
        raise ConfigurationError(f"adam_step: lr must be positive, got {lr}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    params -= lr * mhat / (np.sqrt(vhat) + state.eps)
    _require_finite(params, "adam_step")
    return params


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Array], float], x: Array, h: float = 1e-6) -> Array:
    """Central differences (f(x+h·e) − f(x−h·e)) / 2h per coordinate.

    ``f`` must be pure and deterministic; ``x`` is never mutated.
    """
    if h <= 0.0:
        raise ConfigurationError(f"finite_diff_grad: h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return grad
