"""Network representation and evaluation.

A network is an ordered list of layers applied to row-vector activations:
linear layers compute ``x @ W + b`` with ``W`` of shape (n_in, n_out), conv
layers cross-correlate with zero padding and integer stride, and a type-C
residual block is ``conv2(relu(conv1(x))) + conv_skip(x)`` with a learned
1x1 projection shortcut. The final layer of a classifier/regressor is a
linear layer with no trailing ReLU.

Activations carry a leading batch dimension: (batch, features) for flat
data, (batch, channels, h, w) for images.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError


@dataclass
class Linear:
    weight: np.ndarray  # (n_in, n_out)
    bias: Optional[np.ndarray] = None  # (n_out,)


@dataclass
class Conv2d:
    weight: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: Optional[np.ndarray] = None  # (out_channels,)
    stride: int = 1
    padding: int = 0


@dataclass
class ReLU:
    pass


@dataclass
class MaxPool2d:
    kernel: int
    stride: int


@dataclass
class Flatten:
    pass


@dataclass
class ResBlockC:
    """Residual block whose shortcut is a learned 1x1 convolution, so the
    skip path can participate in rescaling."""

    conv1: Conv2d
    conv2: Conv2d
    conv_skip: Conv2d


@dataclass
class Network:
    layers: list
    input_shape: tuple  # per-sample shape, no batch dimension


PARAMETERIZED = (Linear, Conv2d, ResBlockC)


# ---------------------------------------------------------------------------
# shape inference and structural helpers


def _conv_out_hw(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv/pool window {kh}x{kw} does not fit input {h}x{w}")
    return oh, ow


def _layer_out_shape(layer, shape):
    if isinstance(layer, Linear):
        if len(shape) != 1 or shape[0] != layer.weight.shape[0]:
            raise ShapeError(
                f"linear layer expects ({layer.weight.shape[0]},), got {shape}"
            )
        return (layer.weight.shape[1],)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.weight.shape[1]:
            raise ShapeError(
                f"conv layer expects {layer.weight.shape[1]} channels, got {shape}"
            )
        kh, kw = layer.weight.shape[2], layer.weight.shape[3]
        oh, ow = _conv_out_hw(shape[1], shape[2], kh, kw, layer.stride, layer.padding)
        return (layer.weight.shape[0], oh, ow)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, MaxPool2d):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (c, h, w), got {shape}")
        oh, ow = _conv_out_hw(
            shape[1], shape[2], layer.kernel, layer.kernel, layer.stride, 0
        )
        return (shape[0], oh, ow)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, ResBlockC):
        mid = _layer_out_shape(layer.conv1, shape)
        out = _layer_out_shape(layer.conv2, mid)
        skip = _layer_out_shape(layer.conv_skip, shape)
        if out != skip:
            raise ShapeError(
                f"residual branches disagree: main {out} vs shortcut {skip}"
            )
        return out
    raise ShapeError(f"unknown layer kind {type(layer).__name__}")


def infer_shapes(net):
    """Per-layer output shapes (without batch dim), validating composition."""
    shapes = []
    shape = tuple(net.input_shape)
    for layer in net.layers:
        shape = _layer_out_shape(layer, shape)
        shapes.append(shape)
    return shapes


def named_parameters(net):
    """Ordered (name, array) pairs; names are 'layerindex.field' paths."""
    out = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, (Linear, Conv2d)):
            out.append((f"{i}.weight", layer.weight))
            if layer.bias is not None:
                out.append((f"{i}.bias", layer.bias))
        elif isinstance(layer, ResBlockC):
            for sub in ("conv1", "conv2", "conv_skip"):
                conv = getattr(layer, sub)
                out.append((f"{i}.{sub}.weight", conv.weight))
                if conv.bias is not None:
                    out.append((f"{i}.{sub}.bias", conv.bias))
    return out


def network_dtype(net):
    params = named_parameters(net)
    if not params:
        raise ShapeError("network has no parameters")
    dtype = params[0][1].dtype
    for name, arr in params:
        if arr.dtype != dtype:
            raise ShapeError(f"mixed parameter dtypes: {name} is {arr.dtype}, expected {dtype}")
    return dtype


def _copy_conv(conv, dtype):
    return Conv2d(
        weight=conv.weight.astype(dtype),
        bias=None if conv.bias is None else conv.bias.astype(dtype),
        stride=conv.stride,
        padding=conv.padding,
    )


def copy_network(net, dtype=None):
    """Deep copy, optionally casting every parameter to ``dtype``."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, Linear):
            dt = dtype or layer.weight.dtype
            layers.append(
                Linear(
                    weight=layer.weight.astype(dt),
                    bias=None if layer.bias is None else layer.bias.astype(dt),
                )
            )
        elif isinstance(layer, Conv2d):
            layers.append(_copy_conv(layer, dtype or layer.weight.dtype))
        elif isinstance(layer, ResBlockC):
            dt = dtype or layer.conv1.weight.dtype
            layers.append(
                ResBlockC(
                    conv1=_copy_conv(layer.conv1, dt),
                    conv2=_copy_conv(layer.conv2, dt),
                    conv_skip=_copy_conv(layer.conv_skip, dt),
                )
            )
        elif isinstance(layer, MaxPool2d):
            layers.append(MaxPool2d(layer.kernel, layer.stride))
        elif isinstance(layer, ReLU):
            layers.append(ReLU())
        elif isinstance(layer, Flatten):
            layers.append(Flatten())
        else:
            raise ShapeError(f"unknown layer kind {type(layer).__name__}")
    return Network(layers=layers, input_shape=tuple(net.input_shape))


def count_normalized_elements(net):
    """Number of weight coefficients one full rebalancing cycle touches
    (each weight counted once; biases excluded)."""
    total = 0
    for layer in net.layers:
        if isinstance(layer, (Linear, Conv2d)):
            total += layer.weight.size
        elif isinstance(layer, ResBlockC):
            total += (
                layer.conv1.weight.size
                + layer.conv2.weight.size
                + layer.conv_skip.weight.size
            )
    return int(total)


# ---------------------------------------------------------------------------
# forward


def _windows(x, kh, kw, stride, padding):
    """View of all (kh, kw) windows: (b, c, kh, kw, oh, ow)."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols


def _conv_forward(layer, x):
    kh, kw = layer.weight.shape[2], layer.weight.shape[3]
    cols = _windows(x, kh, kw, layer.stride, layer.padding)
    # (b, c, kh, kw, oh, ow) x (o, c, kh, kw) -> (b, oh, ow, o)
    out = np.tensordot(cols, layer.weight, axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return np.ascontiguousarray(out), cols


def _maxpool_forward(layer, x):
    cols = _windows(x, layer.kernel, layer.kernel, layer.stride, 0)
    b, c, kh, kw, oh, ow = cols.shape
    flat = cols.reshape(b, c, kh * kw, oh, ow)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    return out, idx


def _layer_forward(layer, x):
    """Returns (output, cache-for-backward)."""
    if isinstance(layer, Linear):
        out = x @ layer.weight
        if layer.bias is not None:
            out = out + layer.bias
        return out, x
    if isinstance(layer, Conv2d):
        out, cols = _conv_forward(layer, x)
        return out, (x.shape, cols)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0), x
    if isinstance(layer, MaxPool2d):
        out, idx = _maxpool_forward(layer, x)
        return out, (x.shape, idx)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(layer, ResBlockC):
        h1, cache1 = _layer_forward(layer.conv1, x)
        a = np.maximum(h1, 0)
        h2, cache2 = _layer_forward(layer.conv2, a)
        s, cache_s = _layer_forward(layer.conv_skip, x)
        return h2 + s, (cache1, h1, cache2, cache_s)
    raise ShapeError(f"unknown layer kind {type(layer).__name__}")


def _check_input(net, x):
    x = np.asarray(x)
    if x.shape[1:] != tuple(net.input_shape):
        raise ShapeError(
            f"input shape {x.shape[1:]} does not match network input {tuple(net.input_shape)}"
        )
    return x


def forward(net, x):
    """Evaluate the network on a batch; deterministic and side-effect free."""
    x = _check_input(net, x)
    for layer in net.layers:
        x, _ = _layer_forward(layer, x)
    return x


def forward_trace(net, x):
    """Like :func:`forward` but returns the list of every layer's output,
    final output last."""
    x = _check_input(net, x)
    trace = []
    for layer in net.layers:
        x, _ = _layer_forward(layer, x)
        trace.append(x)
    return trace


# ---------------------------------------------------------------------------
# backward


def _conv_backward(layer, cache, g, grads, prefix):
    x_shape, cols = cache
    # grad wrt weights: contract batch and output positions
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (o, c, kh, kw)
    grads[f"{prefix}.weight"] = gw.astype(layer.weight.dtype, copy=False)
    if layer.bias is not None:
        grads[f"{prefix}.bias"] = g.sum(axis=(0, 2, 3)).astype(layer.bias.dtype, copy=False)
    # grad wrt input: scatter-add through the same windows
    b, c, h, w = x_shape
    kh, kw = layer.weight.shape[2], layer.weight.shape[3]
    stride, padding = layer.stride, layer.padding
    oh, ow = g.shape[2], g.shape[3]
    gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    # (b, o, oh, ow) x (o, c, kh, kw) -> (b, oh, ow, c, kh, kw)
    t = np.tensordot(g, layer.weight, axes=([1], [0]))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                t[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return gxp


def _maxpool_backward(layer, cache, g):
    x_shape, idx = cache
    gx = np.zeros(x_shape, dtype=g.dtype)
    oh, ow = g.shape[2], g.shape[3]
    s = layer.stride
    for t in range(layer.kernel * layer.kernel):
        i, j = divmod(t, layer.kernel)
        mask = idx == t
        gx[:, :, i : i + oh * s : s, j : j + ow * s : s] += g * mask
    return gx


def _layer_backward(layer, cache, g, grads, prefix):
    if isinstance(layer, Linear):
        x = cache
        grads[f"{prefix}.weight"] = (x.T @ g).astype(layer.weight.dtype, copy=False)
        if layer.bias is not None:
            grads[f"{prefix}.bias"] = g.sum(axis=0).astype(layer.bias.dtype, copy=False)
        return g @ layer.weight.T
    if isinstance(layer, Conv2d):
        return _conv_backward(layer, cache, g, grads, prefix)
    if isinstance(layer, ReLU):
        return g * (cache > 0)
    if isinstance(layer, MaxPool2d):
        return _maxpool_backward(layer, cache, g)
    if isinstance(layer, Flatten):
        return g.reshape(cache)
    if isinstance(layer, ResBlockC):
        cache1, h1, cache2, cache_s = cache
        g_a = _conv_backward(layer.conv2, cache2, g, grads, f"{prefix}.conv2")
        g_h1 = g_a * (h1 > 0)
        gx_main = _conv_backward(layer.conv1, cache1, g_h1, grads, f"{prefix}.conv1")
        gx_skip = _conv_backward(layer.conv_skip, cache_s, g, grads, f"{prefix}.conv_skip")
        return gx_main + gx_skip
    raise ShapeError(f"unknown layer kind {type(layer).__name__}")


def backward(net, x, loss_grad):
    """Parameter gradients for a batch given d(loss)/d(output).

    Returns a dict keyed like :func:`named_parameters`.
    """
    x = _check_input(net, x)
    caches = []
    out = x
    for layer in net.layers:
        out, cache = _layer_forward(layer, out)
        caches.append(cache)
    g = np.asarray(loss_grad)
    if g.shape != out.shape:
        raise ShapeError(f"loss gradient shape {g.shape} != output shape {out.shape}")
    grads = {}
    for i in reversed(range(len(net.layers))):
        g = _layer_backward(net.layers[i], caches[i], g, grads, str(i))
    return grads
