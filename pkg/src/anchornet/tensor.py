"""Minimal dense tensor engine with valid (padding-free) convolutions.

Tensors are numpy arrays plus an optional reverse-mode gradient tape.  The
op set is deliberately small: exactly what a padding-free CNN extractor, a
GAP + linear head, and a small downstream classifier need.  Convolution has
no padding parameter at all; padded networks must be assembled explicitly
from `pad2d`, which keeps the spatial contract of `conv2d_valid` exact:
output location (i, j) depends on input rows [i*s_h, i*s_h + k_h) and
columns [j*s_w, j*s_w + k_w) only.

All forward ops are pure; a tape node is recorded only while gradients are
enabled (see `no_grad`) and some input requires them.  Gradients accumulate
additively across fan-out.  Ops preserve dtype, so running float64 end to
end gives the headroom finite-difference checks need.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class GradError(RuntimeError):
    """Backward invoked without a recorded forward computation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array with optional gradient tracking.

    The canonical layout for image data is rank-4 row-major
    (batch, channel, height, width); vector-valued intermediates such as
    logits are rank-2 (batch, features).  Spatial ops reject other ranks.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim >= 1 and min(arr.shape, default=1) < 1:
            raise ShapeError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        `grad` defaults to ones.  Raises GradError when no forward pass was
        recorded through this tensor (nothing on the tape).
        """
        if self._backward is None and not self._parents:
            raise GradError("backward called without a recorded forward computation")
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

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
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward is None:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Layer parameter containers


@dataclass
class ConvKernel:
    """Convolution weights (out_channels, in_channels_per_group, k_h, k_w).

    There is no padding field: padding does not exist in this engine.
    groups must divide both channel counts; groups == in_channels is
    depthwise convolution.
    """

    weights: Tensor
    stride: tuple[int, int] = (1, 1)
    groups: int = 1

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise ShapeError("conv weights must be rank-4 (out, in/groups, kh, kw)")
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ShapeError("stride components must be >= 1")
        if self.groups < 1 or self.weights.shape[0] % self.groups:
            raise ShapeError("groups must divide out_channels")


@dataclass
class LinearLayer:
    """Fully connected layer: weights (classes N x features C), optional bias.

    The patch-proposal head uses bias=None so the class activation map
    decomposes the logit exactly (the logit is then the spatial mean of the
    map, with no constant offset).
    """

    weights: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weights.data.ndim != 2:
            raise ShapeError("linear weights must be rank-2 (classes, features)")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal class count")


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state.

    `running_*` statistics are populated by train-mode passes; inference
    before any train pass (or explicit initialization) is an error.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


# ---------------------------------------------------------------------------
# Plain vector math (no tape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    t = 1.0 / (1.0 + z)
    return np.where(x >= 0, t, 1.0 - t)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; outputs are positive and sum to 1 on `axis`."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_vjp(probs: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output `probs`."""
    inner = np.sum(grad_out * probs, axis=axis, keepdims=True)
    return probs * (grad_out - inner)


# ---------------------------------------------------------------------------
# Convolution


def _require_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a rank-4 (B, C, H, W) tensor, got shape {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    b, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    b, c, h, w = x_shape
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    view = dcols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw] += view[:, :, i, j]
    return dx


def conv2d_valid(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Valid convolution: output spatial size is floor((in - k)/s) + 1.

    Raises ShapeError when the kernel exceeds the input extent or channel
    counts are incompatible with `groups`.
    """
    _require_rank4(x, "conv2d_valid")
    w = kernel.weights
    co, cin_g, kh, kw = w.shape
    sh, sw = kernel.stride
    groups = kernel.groups
    b, cin, h, wd = x.shape
    if cin % groups or cin_g != cin // groups:
        raise ShapeError(
            f"channel mismatch: input has {cin} channels, kernel expects "
            f"{cin_g} per group with groups={groups}"
        )
    if kh > h or kw > wd:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{wd}")

    if groups == 1:
        if kh == 1 and kw == 1 and sh == 1 and sw == 1:
            out, cache = _conv_1x1_forward(x.data, w.data)
        else:
            out, cache = _conv_dense_forward(x.data, w.data, sh, sw)
    elif groups == cin and cin_g == 1 and co == cin:
        out, cache = _conv_depthwise_forward(x.data, w.data, sh, sw)
    else:
        out, cache = _conv_grouped_forward(x.data, w.data, sh, sw, groups)

    def backward(grad):
        dx, dw = cache(grad)
        _accumulate(x, dx)
        _accumulate(w, dw)

    return _make_node(out, (x, w), backward)


def _conv_1x1_forward(x, w):
    b, c, h, wd = x.shape
    co = w.shape[0]
    w2 = w.reshape(co, c)
    out = np.matmul(w2, x.reshape(b, c, h * wd)).reshape(b, co, h, wd)

    def back(grad):
        g2 = grad.reshape(b, co, h * wd)
        dx = np.matmul(w2.T, g2).reshape(x.shape)
        dw = np.einsum("bol,bcl->oc", g2, x.reshape(b, c, h * wd)).reshape(w.shape)
        return dx, dw

    return out, back


def _conv_dense_forward(x, w, sh, sw):
    b = x.shape[0]
    co, cin, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, sh, sw)
    w2 = w.reshape(co, cin * kh * kw)
    out = np.matmul(w2, cols).reshape(b, co, ho, wo)

    def back(grad):
        g2 = grad.reshape(b, co, ho * wo)
        dw = np.einsum("bol,bkl->ok", g2, cols).reshape(w.shape)
        dcols = np.matmul(w2.T, g2)
        dx = _col2im(dcols, x.shape, kh, kw, sh, sw, ho, wo)
        return dx, dw

    return out, back


def _conv_depthwise_forward(x, w, sh, sw):
    b, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho = (h - kh) // sh + 1
    wo = (wd - kw) // sw + 1
    out = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = x[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw]
            out += tap * w[:, 0, i, j][None, :, None, None]

    def back(grad):
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                tap = x[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw]
                dw[:, 0, i, j] = np.einsum("bchw,bchw->c", grad, tap)
                dx[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw] += (
                    grad * w[:, 0, i, j][None, :, None, None]
                )
        return dx, dw

    return out, back


def _conv_grouped_forward(x, w, sh, sw, groups):
    b, cin, _, _ = x.shape
    co = w.shape[0]
    cig, cog = cin // groups, co // groups
    outs, backs = [], []
    for g in range(groups):
        xg = x[:, g * cig : (g + 1) * cig]
        wg = w[g * cog : (g + 1) * cog]
        og, bg = _conv_dense_forward(xg, wg, sh, sw)
        outs.append(og)
        backs.append(bg)
    out = np.concatenate(outs, axis=1)

    def back(grad):
        dx = np.empty_like(x)
        dw = np.empty_like(w)
        for g in range(groups):
            dxg, dwg = backs[g](grad[:, g * cog : (g + 1) * cog])
            dx[:, g * cig : (g + 1) * cig] = dxg
            dw[g * cog : (g + 1) * cog] = dwg
        return dx, dw

    return out, back


# ---------------------------------------------------------------------------
# Pointwise and pooling ops


def gap(x: Tensor) -> Tensor:
    """Global average pooling: (B, C, H, W) -> (B, C, 1, 1), mean over H*W."""
    _require_rank4(x, "gap")
    b, c, h, w = x.shape
    out = np.mean(x.data, axis=(2, 3), keepdims=True)

    def backward(grad):
        _accumulate(x, np.broadcast_to(grad / (h * w), x.shape).copy())

    return _make_node(out, (x,), backward)


def linear(features: Tensor, layer: LinearLayer) -> Tensor:
    """(B, C) or (B, C, 1, 1) features -> (B, N) logits: x @ W.T + bias."""
    f = features.data
    if f.ndim == 4:
        if f.shape[2] != 1 or f.shape[3] != 1:
            raise ShapeError("linear expects spatially pooled (B, C, 1, 1) features")
        f2 = f.reshape(f.shape[0], f.shape[1])
    elif f.ndim == 2:
        f2 = f
    else:
        raise ShapeError(f"linear expects rank-2 or pooled rank-4 features, got {features.shape}")
    w, bias = layer.weights, layer.bias
    if f2.shape[1] != w.shape[1]:
        raise ShapeError(f"feature length {f2.shape[1]} != weight width {w.shape[1]}")
    out = f2 @ w.data.T
    if bias is not None:
        out = out + bias.data

    parents = (features, w) + ((bias,) if bias is not None else ())

    def backward(grad):
        _accumulate(features, (grad @ w.data).reshape(features.shape))
        _accumulate(w, grad.T @ f2)
        if bias is not None:
            _accumulate(bias, grad.sum(axis=0))

    return _make_node(out, parents, backward)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); derivative is s*(1 + x*(1 - s)) with s = sigmoid(x)."""
    s = sigmoid(x.data)
    out = x.data * s

    def backward(grad):
        d = 1.0 - s
        d *= x.data
        d += 1.0
        d *= s
        d *= grad
        _accumulate(x, d)

    return _make_node(out, (x,), backward)


def batchnorm(x: Tensor, bn: BatchNormParams, train: bool) -> Tensor:
    """Per-channel normalize-and-affine over (B, H, W); spatially pointwise.

    Train mode uses biased batch statistics and updates the running ones;
    infer mode requires populated running statistics.
    """
    _require_rank4(x, "batchnorm")
    b, c, h, w = x.shape
    if c != bn.gamma.shape[0]:
        raise ShapeError(f"batchnorm has {bn.gamma.shape[0]} channels, input has {c}")
    gamma, beta = bn.gamma, bn.beta
    g4 = gamma.data[None, :, None, None]

    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + bn.eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        out = g4 * xhat + beta.data[None, :, None, None]
        m = bn.momentum
        bn.running_mean = (1.0 - m) * bn.running_mean + m * mean.astype(bn.running_mean.dtype)
        bn.running_var = (1.0 - m) * bn.running_var + m * var.astype(bn.running_var.dtype)
        bn.initialized = True

        def backward(grad):
            dbeta = grad.sum(axis=(0, 2, 3))
            dgamma = (grad * xhat).sum(axis=(0, 2, 3))
            gmean = grad.mean(axis=(0, 2, 3))
            gx_mean = (grad * xhat).mean(axis=(0, 2, 3))
            dx = (g4 * inv[None, :, None, None]) * (
                grad - gmean[None, :, None, None] - xhat * gx_mean[None, :, None, None]
            )
            _accumulate(x, dx)
            _accumulate(gamma, dgamma)
            _accumulate(beta, dbeta)

        return _make_node(out, (x, gamma, beta), backward)

    if not bn.initialized:
        raise GradError("batchnorm inference requires populated running statistics")
    inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
    xhat_inf = (x.data - bn.running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = (g4 * xhat_inf + beta.data[None, :, None, None]).astype(x.dtype, copy=False)

    def backward(grad):
        _accumulate(x, grad * (gamma.data * inv)[None, :, None, None])
        _accumulate(gamma, (grad * xhat_inf).sum(axis=(0, 2, 3)))
        _accumulate(beta, grad.sum(axis=(0, 2, 3)))

    return _make_node(out, (x, gamma, beta), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal-shape tensors (residual join)."""
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data

    def backward(grad):
        _accumulate(a, grad)
        _accumulate(b, grad)

    return _make_node(out, (a, b), backward)


def center_crop(x: Tensor, margin: int) -> Tensor:
    """Crop `margin` pixels from each spatial side (residual alignment)."""
    _require_rank4(x, "center_crop")
    if margin == 0:
        return x
    b, c, h, w = x.shape
    if 2 * margin >= h or 2 * margin >= w:
        raise ShapeError(f"margin {margin} too large for {h}x{w} input")
    out = x.data[:, :, margin : h - margin, margin : w - margin].copy()

    def backward(grad):
        dx = np.zeros_like(x.data)
        dx[:, :, margin : h - margin, margin : w - margin] = grad
        _accumulate(x, dx)

    return _make_node(out, (x,), backward)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-embed the spatial dims by `pad` on every side.

    This is the only way to build a padded network on this engine; the
    convolution itself never pads, so padded stacks are explicit and the
    exact receptive-field mapping of valid stacks stays intact.
    """
    _require_rank4(x, "pad2d")
    if pad < 0:
        raise ShapeError("pad must be >= 0")
    if pad == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def backward(grad):
        _accumulate(x, grad[:, :, pad:-pad, pad:-pad])

    return _make_node(out, (x,), backward)


def resize_bilinear(image: Tensor, target: tuple[int, int]) -> Tensor:
    """Bilinear resample with half-pixel centers (align-corners false)."""
    _require_rank4(image, "resize_bilinear")
    th, tw = target
    if th < 1 or tw < 1:
        raise ShapeError("resize target must be at least 1x1")
    b, c, h, w = image.shape
    dtype = image.dtype

    def axis_coords(size_in, size_out):
        src = (np.arange(size_out, dtype=np.float64) + 0.5) * (size_in / size_out) - 0.5
        src = np.clip(src, 0.0, size_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, size_in - 1)
        frac = (src - lo).astype(dtype)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, th)
    x0, x1, fx = axis_coords(w, tw)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]

    d = image.data
    out = (
        d[:, :, y0[:, None], x0[None, :]] * (wy0 * wx0)
        + d[:, :, y0[:, None], x1[None, :]] * (wy0 * wx1)
        + d[:, :, y1[:, None], x0[None, :]] * (wy1 * wx0)
        + d[:, :, y1[:, None], x1[None, :]] * (wy1 * wx1)
    ).astype(dtype, copy=False)

    def backward(grad):
        dx = np.zeros_like(d)
        for ys, wys in ((y0, wy0), (y1, wy1)):
            for xs, wxs in ((x0, wx0), (x1, wx1)):
                np.add.at(
                    dx,
                    (slice(None), slice(None), ys[:, None], xs[None, :]),
                    grad * (wys * wxs),
                )
        _accumulate(image, dx)

    return _make_node(out, (image,), backward)
