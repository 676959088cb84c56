"""Reverse-mode automatic differentiation over dense volumetric arrays.

Tensors are dense numpy arrays wrapped in graph nodes. 5-D activations use
the (batch, channels, depth, height, width) layout throughout. Every forward
operation records a vector-Jacobian product; ``backward`` on a scalar walks
the graph once in reverse topological order and accumulates exact gradients
into ``.grad`` buffers. There is no implicit broadcasting between tensors:
binary ops require equal shapes (python scalars are the one exception).

Default precision is float32; building leaves in float64 switches the whole
graph for finite-difference verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_AXIS_NAMES = ("depth", "height", "width")


class ShapeError(ValueError):
    """An operation rejected its operands because of incompatible shapes."""


def _triple(value, name):
    if isinstance(value, (int, np.integer)):
        value = (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"{name} must be an int or a triple, got {value!r}")
    return value


def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires equal shapes, got {a.shape} vs {b.shape}")


class Tensor:
    """A node of the differentiation graph holding a dense array.

    ``requires_grad`` marks trainable leaves; graph outputs inherit it from
    their inputs. ``backward`` accumulates into ``.grad`` additively, so
    repeated calls without ``zero_grad`` sum their contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "op_state", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None        # name of the producing operation, when graph-tracked
        self.op_state = None  # op-specific decision record (relu mask, pool argmax)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A new leaf sharing this tensor's data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), float(other))

    def __truediv__(self, other):
        return div(self, other)

    def sum(self):
        return tensor_sum(self)

    def log(self):
        return log(self)

    def clamp_min(self, bound):
        return clamp_min(self, bound)

    def relu(self):
        return relu(self)

    def softmax_channels(self):
        return softmax_channels(self)

    def item(self):
        return float(self.data)

    # -- reverse pass -------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into all reachable tensors.

        Each call performs one independent reverse sweep; gradients add onto
        whatever is already stored in ``.grad``.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        topo = _topological_order(self)
        cotangent = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            grad_out = cotangent.pop(id(node), None)
            if grad_out is None:
                continue
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += grad_out
            if node._vjp is None:
                continue
            for parent, contrib in zip(node._parents, node._vjp(grad_out)):
                if not parent.requires_grad or contrib is None:
                    continue
                key = id(parent)
                if key in cotangent:
                    cotangent[key] = cotangent[key] + contrib
                else:
                    cotangent[key] = contrib


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _from_op(data, parents, vjp, op=None, op_state=None):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
        out.op_state = op_state
    return out


def graph_nodes(root):
    """All graph-tracked tensors reachable from ``root``, in a fixed order."""
    return _topological_order(root)


def as_tensor(value, dtype=None):
    """Wrap arrays or numbers as constant (non-differentiable) tensors."""
    if isinstance(value, Tensor):
        return value
    data = np.asarray(value, dtype=dtype)
    return Tensor(data)


# -- parameter containers ----------------------------------------------------


@dataclass
class ConvKernel:
    """Convolution weights (out_channels, in_channels, kD, kH, kW) plus bias.

    For transposed convolutions the same container is used with the adjoint
    orientation: axis 0 is the *input* channel count and axis 1 the output,
    so bias length must equal ``weights.shape[1]`` there.
    """

    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weights.data.ndim != 5:
            raise ShapeError(f"kernel weights must be 5-D, got {self.weights.data.shape}")
        if self.bias.data.ndim != 1:
            raise ShapeError(f"kernel bias must be 1-D, got {self.bias.data.shape}")

    def tensors(self):
        return (("weight", self.weights), ("bias", self.bias))


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gamma.data.shape[0]
        for name, vec in (("beta", self.beta.data),
                          ("running_mean", self.running_mean),
                          ("running_var", self.running_var)):
            if vec.shape != (c,):
                raise ShapeError(f"batchnorm {name} must have shape ({c},), got {vec.shape}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"batchnorm momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ValueError(f"batchnorm epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0.0):
            raise ValueError("batchnorm running_var must be non-negative")

    @property
    def channels(self):
        return self.gamma.data.shape[0]

    def tensors(self):
        return (("gamma", self.gamma), ("beta", self.beta))


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scalar = float(b)
        return _from_op(a.data + np.asarray(scalar, dtype=a.dtype),
                        (a,), lambda g: (g,))
    _require_same_shape(a.data, b.data, "add")
    return _from_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scalar = float(b)
        return _from_op(a.data * np.asarray(scalar, dtype=a.dtype),
                        (a,), lambda g: (g * np.asarray(scalar, dtype=a.dtype),))
    _require_same_shape(a.data, b.data, "mul")
    return _from_op(a.data * b.data, (a, b),
                    lambda g: (g * b.data, g * a.data))


def div(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _require_same_shape(a.data, b.data, "div")
    out = a.data / b.data

    def vjp(g):
        return (g / b.data, -g * a.data / (b.data * b.data))

    return _from_op(out, (a, b), vjp)


def concat_channels(a, b):
    """Concatenate two 5-D tensors along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 5 or b.data.ndim != 5:
        raise ShapeError("concat_channels expects 5-D tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(
            f"concat_channels requires equal non-channel dims, got {a.data.shape} vs {b.data.shape}")
    split = a.data.shape[1]

    def vjp(g):
        return (g[:, :split], g[:, split:])

    return _from_op(np.concatenate((a.data, b.data), axis=1), (a, b), vjp)


def slice_channels(a, start, stop):
    """Channel slice [start:stop) of a 5-D tensor; gradient scatters back."""
    a = as_tensor(a)
    if a.data.ndim != 5:
        raise ShapeError("slice_channels expects a 5-D tensor")
    channels = a.data.shape[1]
    if not 0 <= start < stop <= channels:
        raise ShapeError(f"channel slice [{start}:{stop}) out of range for {channels} channels")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _from_op(a.data[:, start:stop].copy(), (a,), vjp)


def tensor_sum(a):
    a = as_tensor(a)

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape),)

    return _from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), vjp)


def log(a):
    a = as_tensor(a)
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a, bound):
    a = as_tensor(a)
    bound = float(bound)
    mask = a.data > bound
    return _from_op(np.maximum(a.data, np.asarray(bound, dtype=a.dtype)),
                    (a,), lambda g: (g * mask,), op="clamp_min", op_state=mask)


def relu(a):
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _from_op(a.data * mask, (a,), lambda g: (g * mask,), op="relu", op_state=mask)


def softmax_channels(a):
    """Per-voxel softmax across the channel axis, max-shifted for stability."""
    a = as_tensor(a)
    if a.data.ndim != 5:
        raise ShapeError("softmax_channels expects a 5-D tensor")
    if a.data.shape[1] < 1:
        raise ShapeError("softmax_channels requires at least one channel")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sm = exp / exp.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * sm).sum(axis=1, keepdims=True)
        return (sm * (g - inner),)

    return _from_op(sm, (a,), vjp)


# -- convolution -------------------------------------------------------------


def _check_conv_channels(in_channels, kernel_channels, what):
    if in_channels != kernel_channels:
        raise ShapeError(
            f"{what}: input has {in_channels} channels but the kernel expects {kernel_channels}")


def _gather_conv(x, w, stride, out_spatial):
    """out[n,o,p] = sum_{i,k} x[n,i,p*s+k] * w[o,i,k] for already padded x."""
    n = x.shape[0]
    cout = w.shape[0]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    do, ho, wo = out_spatial
    out = np.zeros((n, cout, do, ho, wo), dtype=x.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                view = x[:, :,
                         a:a + (do - 1) * sd + 1:sd,
                         b:b + (ho - 1) * sh + 1:sh,
                         c:c + (wo - 1) * sw + 1:sw]
                # (cout, n, do, ho, wo) <- contract over input channels
                part = np.tensordot(w[:, :, a, b, c], view, axes=([1], [1]))
                out += part.transpose(1, 0, 2, 3, 4)
    return out


def _scatter_conv(y, w, stride, out_spatial):
    """Adjoint of ``_gather_conv``: scatters y back through the kernel taps."""
    n = y.shape[0]
    cin = w.shape[1]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    do, ho, wo = y.shape[2:]
    out = np.zeros((n, cin) + tuple(out_spatial), dtype=y.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                part = np.tensordot(w[:, :, a, b, c], y, axes=([0], [1]))
                out[:, :,
                    a:a + (do - 1) * sd + 1:sd,
                    b:b + (ho - 1) * sh + 1:sh,
                    c:c + (wo - 1) * sw + 1:sw] += part.transpose(1, 0, 2, 3, 4)
    return out


def _kernel_grad(x, gy, stride, kshape):
    """dW[o,i,k] = sum_{n,p} x[n,i,p*s+k] * gy[n,o,p] for already padded x."""
    kd, kh, kw = kshape[2:]
    sd, sh, sw = stride
    do, ho, wo = gy.shape[2:]
    dw = np.zeros(kshape, dtype=x.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                view = x[:, :,
                         a:a + (do - 1) * sd + 1:sd,
                         b:b + (ho - 1) * sh + 1:sh,
                         c:c + (wo - 1) * sw + 1:sw]
                dw[:, :, a, b, c] = np.tensordot(gy, view, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return dw


def conv3d(x, kernel, stride=1, padding=0):
    """Strided cross-correlation of a 5-D tensor with a ``ConvKernel``.

    Output spatial extent per axis is ``floor((dim + 2*pad - k)/stride) + 1``.
    Differentiable w.r.t. the input, the weights and the bias.
    """
    x = as_tensor(x)
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    w, bias = kernel.weights, kernel.bias
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d expects a 5-D input, got shape {x.data.shape}")
    _check_conv_channels(x.data.shape[1], w.data.shape[1], "conv3d")
    if bias.data.shape[0] != w.data.shape[0]:
        raise ShapeError(
            f"conv3d: bias length {bias.data.shape[0]} != out_channels {w.data.shape[0]}")
    out_spatial = []
    for axis, name in enumerate(_AXIS_NAMES):
        dim, k = x.data.shape[2 + axis], w.data.shape[2 + axis]
        padded = dim + 2 * padding[axis]
        if padded < k:
            raise ShapeError(
                f"conv3d: {name} {dim} plus padding {padding[axis]} is smaller than kernel {k}")
        out_spatial.append((padded - k) // stride[axis] + 1)
    out_spatial = tuple(out_spatial)

    pd, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = _gather_conv(xp, w.data, stride, out_spatial)
    out += bias.data.reshape(1, -1, 1, 1, 1)

    def vjp(g):
        grad_x = None
        if x.requires_grad:
            gxp = _scatter_conv(g, w.data, stride, xp.shape[2:])
            grad_x = gxp[:, :,
                         pd:gxp.shape[2] - pd,
                         ph:gxp.shape[3] - ph,
                         pw:gxp.shape[4] - pw]
        grad_w = _kernel_grad(xp, g, stride, w.data.shape) if w.requires_grad else None
        grad_b = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return (grad_x, grad_w, grad_b)

    return _from_op(out, (x, w, bias), vjp)


def conv3d_transpose(x, kernel, stride=1):
    """Adjoint of ``conv3d`` (padding 0) with the same kernel and stride.

    The kernel is consumed in adjoint orientation: ``weights.shape[0]`` is the
    input channel count, ``weights.shape[1]`` the output. Spatial dims map to
    ``(dim - 1) * stride + k``.
    """
    x = as_tensor(x)
    stride = _triple(stride, "stride")
    w, bias = kernel.weights, kernel.bias
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d_transpose expects a 5-D input, got shape {x.data.shape}")
    _check_conv_channels(x.data.shape[1], w.data.shape[0], "conv3d_transpose")
    if bias.data.shape[0] != w.data.shape[1]:
        raise ShapeError(
            f"conv3d_transpose: bias length {bias.data.shape[0]} != out_channels {w.data.shape[1]}")
    out_spatial = tuple(
        (x.data.shape[2 + axis] - 1) * stride[axis] + w.data.shape[2 + axis]
        for axis in range(3))

    # _scatter_conv contracts weights.shape[0] against the input channels and
    # emits weights.shape[1] channels, which is exactly the adjoint pairing.
    out = _scatter_conv(x.data, w.data, stride, out_spatial)
    out += bias.data.reshape(1, -1, 1, 1, 1)

    def vjp(g):
        grad_x = None
        if x.requires_grad:
            grad_x = _gather_conv(g, w.data, stride, x.data.shape[2:])
        grad_w = _kernel_grad(g, x.data, stride, w.data.shape) if w.requires_grad else None
        grad_b = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return (grad_x, grad_w, grad_b)

    return _from_op(out, (x, w, bias), vjp)


# -- pooling and upsampling --------------------------------------------------


def maxpool3d(x, window=2, stride=2):
    """Per-window maximum; the gradient routes to the first maximal voxel."""
    x = as_tensor(x)
    window = _triple(window, "window")
    stride = _triple(stride, "stride")
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d expects a 5-D input, got shape {x.data.shape}")
    for axis, name in enumerate(_AXIS_NAMES):
        dim = x.data.shape[2 + axis]
        if dim < window[axis] or (dim - window[axis]) % stride[axis] != 0:
            raise ShapeError(
                f"maxpool3d: {name} {dim} is not tiled by window {window[axis]}"
                f" with stride {stride[axis]}")

    windows = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=(2, 3, 4))
    windows = windows[:, :, ::stride[0], ::stride[1], ::stride[2]]
    n, c, do, ho, wo = windows.shape[:5]
    flat = windows.reshape(n, c, do, ho, wo, -1)
    # argmax over the trailing axis keeps the first maximum, which is the
    # lexicographically smallest (kd, kh, kw) offset, i.e. scan order.
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def vjp(g):
        kd = argmax // (window[1] * window[2])
        kh = (argmax // window[2]) % window[1]
        kw = argmax % window[2]
        ni, ci, di, hi, wi = np.indices(argmax.shape, sparse=False)
        grad = np.zeros_like(x.data)
        np.add.at(grad,
                  (ni, ci,
                   di * stride[0] + kd,
                   hi * stride[1] + kh,
                   wi * stride[2] + kw),
                  g)
        return (grad,)

    return _from_op(np.ascontiguousarray(out), (x,), vjp, op="maxpool3d", op_state=argmax)


def repeat_upsample3d(x, factor=2):
    """Nearest-neighbor repetition; each voxel tiles a factor-sized block."""
    x = as_tensor(x)
    factor = _triple(factor, "factor")
    if x.data.ndim != 5:
        raise ShapeError(f"repeat_upsample3d expects a 5-D input, got shape {x.data.shape}")
    if min(factor) < 1:
        raise ShapeError(f"repeat_upsample3d factor must be >= 1 per axis, got {factor}")
    out = x.data.repeat(factor[0], axis=2).repeat(factor[1], axis=3).repeat(factor[2], axis=4)

    def vjp(g):
        n, c, d, h, w = x.data.shape
        blocks = g.reshape(n, c, d, factor[0], h, factor[1], w, factor[2])
        return (blocks.sum(axis=(3, 5, 7)),)

    return _from_op(out, (x,), vjp)


# -- batch normalization -----------------------------------------------------


def batchnorm3d(x, state, mode="train"):
    """Channel-wise batch normalization of a 5-D tensor.

    ``train`` normalizes by batch statistics over (N, D, H, W), updates the
    running statistics with the configured momentum and differentiates
    through the batch statistics; ``infer`` uses the stored running
    statistics. Zero-variance channels are kept finite by epsilon.
    """
    x = as_tensor(x)
    if x.data.ndim != 5:
        raise ShapeError(f"batchnorm3d expects a 5-D input, got shape {x.data.shape}")
    if x.data.shape[1] != state.channels:
        raise ShapeError(
            f"batchnorm3d: input has {x.data.shape[1]} channels, state has {state.channels}")
    if mode not in ("train", "infer"):
        raise ValueError(f"batchnorm3d mode must be 'train' or 'infer', got {mode!r}")

    gamma, beta = state.gamma, state.beta
    eps = np.asarray(state.epsilon, dtype=x.dtype)
    axes = (0, 2, 3, 4)

    def per_channel(vec):
        return vec.reshape(1, -1, 1, 1, 1)

    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean.astype(x.dtype, copy=False)
        var = state.running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var.astype(x.dtype, copy=False) + eps)
    xhat = (x.data - per_channel(mean.astype(x.dtype, copy=False))) * per_channel(inv_std)
    out = per_channel(gamma.data) * xhat + per_channel(beta.data)

    count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3] * x.data.shape[4]

    def vjp(g):
        grad_gamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        grad_beta = g.sum(axis=axes) if beta.requires_grad else None
        grad_x = None
        if x.requires_grad:
            gxhat = g * per_channel(gamma.data)
            if mode == "train":
                sum_g = gxhat.sum(axis=axes)
                sum_gx = (gxhat * xhat).sum(axis=axes)
                grad_x = (per_channel(inv_std) / count) * (
                    count * gxhat - per_channel(sum_g) - xhat * per_channel(sum_gx))
            else:
                grad_x = gxhat * per_channel(inv_std)
        return (grad_x, grad_gamma, grad_beta)

    return _from_op(out, (x, gamma, beta), vjp)
