"""Reference architecture builders: fully-connected stacks and the
18-layer residual network with learned 1x1 shortcuts on every block (the
type-C wiring, where skip paths carry weights and so participate in
rescaling). Weights use He initialization."""

import numpy as np

from .network import Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU, ResBlockC


def he_linear(rng, n_in, n_out, bias=True, dtype=np.float64):
    w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
    b = np.zeros(n_out) if bias else None
    return Linear(w.astype(dtype), None if b is None else b.astype(dtype))


def he_conv(rng, out_c, in_c, k, stride=1, padding=0, bias=False, dtype=np.float64):
    fan_in = in_c * k * k
    w = rng.standard_normal((out_c, in_c, k, k)) * np.sqrt(2.0 / fan_in)
    b = np.zeros(out_c) if bias else None
    return Conv2d(w.astype(dtype), None if b is None else b.astype(dtype), stride, padding)


def fc_network(widths, seed=0, dtype=np.float64, bias=True):
    """ReLU MLP over a width chain [n_0, ..., n_q]; the last layer is linear
    with no activation."""
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(widths) - 1):
        layers.append(he_linear(rng, widths[k], widths[k + 1], bias=bias, dtype=dtype))
        if k < len(widths) - 2:
            layers.append(ReLU())
    return Network(layers=layers, input_shape=(widths[0],))


def _basic_block(rng, in_c, out_c, stride, dtype):
    return ResBlockC(
        conv1=he_conv(rng, out_c, in_c, 3, stride=stride, padding=1, dtype=dtype),
        conv2=he_conv(rng, out_c, out_c, 3, stride=1, padding=1, dtype=dtype),
        conv_skip=he_conv(rng, out_c, in_c, 1, stride=stride, padding=0, dtype=dtype),
    )


def resnet18_type_c(seed=0, dtype=np.float32, num_classes=1000, input_hw=224):
    """Standard 18-layer arrangement: 7x7/2 stem, 3x3/2 max-pool, four
    stages of two blocks at 64/128/256/512 channels (stages 2-4 open with
    stride 2), global max-pool, flatten, linear classifier. Every shortcut
    is a learned 1x1 convolution."""
    rng = np.random.default_rng(seed)
    layers = [he_conv(rng, 64, 3, 7, stride=2, padding=3, dtype=dtype), ReLU(), MaxPool2d(3, 2)]
    hw = (input_hw + 2 * 3 - 7) // 2 + 1
    hw = (hw - 3) // 2 + 1
    in_c = 64
    for stage, out_c in enumerate((64, 128, 256, 512)):
        for b in range(2):
            stride = 2 if (b == 0 and stage > 0) else 1
            layers.append(_basic_block(rng, in_c, out_c, stride, dtype))
            layers.append(ReLU())
            if stride == 2:
                hw = (hw - 1) // 2 + 1
            in_c = out_c
    layers.append(MaxPool2d(hw, 1))
    layers.append(Flatten())
    layers.append(he_linear(rng, 512, num_classes, bias=True, dtype=dtype))
    return Network(layers=layers, input_shape=(3, input_hw, input_hw))
