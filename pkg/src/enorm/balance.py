"""Iterative weight rebalancing.

The algorithm walks adjacent pairs of parameterized layers left to right.
For each pair it computes one strictly positive coefficient per boundary
channel, multiplies the left layer's outgoing weights by it and divides the
right layer's incoming weights by it. The coefficient sqrt(R/L) (row norm of
the right matrix over column norm of the left matrix, optionally biased by a
depth weighting) is the unique minimizer of the pair's joint entrywise
p-norm, so one full sweep never increases the global norm and iterating
sweeps converges to the unique minimum-norm representative of the network's
rescaling-equivalence class.

ReLU, max-pool and flatten layers are transparent: positive per-channel
scaling commutes with all three, so boundaries attach to the nearest
parameterized layers. Residual blocks with learned 1x1 shortcuts are
handled with one internal pair update (conv1/conv2) plus inter-unit updates
that treat the block as a single surrogate conv tensor, the channel-aligned
union of conv1 and conv_skip coefficients.

All coefficient arithmetic runs in float64; single-precision networks are
upcast for the duration of a balance run and written back at the end.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DisconnectedNeuronError, NumericError, ShapeError
from .network import (
    PARAMETERIZED,
    Conv2d,
    Linear,
    ResBlockC,
    copy_network,
    named_parameters,
    network_dtype,
)
from .tensor_ops import (
    conv_from_left_matrix,
    conv_from_right_matrix,
    conv_to_left_matrix,
    conv_to_right_matrix,
    pnorm_cols,
    pnorm_rows,
    scale_cols,
    scale_rows,
)


@dataclass
class Asymmetric:
    """Depth weighting of the per-layer norm terms.

    mode 'off' weighs every layer equally; 'uniform' applies c^(p*(q-k)) to
    layer k of q, penalizing layers geometrically by depth; 'adaptive'
    weighs each layer by the inverse of its weight-matrix size.
    """

    mode: str = "off"  # off | uniform | adaptive
    c: float = 1.0

    def __post_init__(self):
        if self.mode not in ("off", "uniform", "adaptive"):
            raise ValueError(f"unknown asymmetric mode {self.mode!r}")
        if self.c <= 0:
            raise ValueError("uniform weighting base c must be > 0")

    @classmethod
    def off(cls):
        return cls("off")

    @classmethod
    def uniform(cls, c):
        return cls("uniform", c)

    @classmethod
    def adaptive(cls):
        return cls("adaptive")


@dataclass
class BalanceReport:
    cycles_run: int
    lp_norm_per_cycle: list  # [0] is the pre-balance norm, then one per cycle
    max_coeff_deviation: float  # |d - 1|_inf over the last cycle
    converged: bool
    max_dev_per_cycle: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# pair-level operations


def _check_positive(d):
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or not np.all(d > 0):
        raise ValueError("rescaling coefficients must be a 1D strictly positive vector")
    return d


def pair_coefficients(left, right, p=2.0, c_ratio=1.0, label=""):
    """Optimal rescaling coefficients for one adjacent pair.

    ``left`` has one column per boundary channel, ``right`` one row per
    boundary channel. Returns d with d[i] = sqrt(R[i]/L[i]) * c_ratio^(1/2p),
    the minimizer of c_left*|left·D|_p^p + c_right*|D^-1·right|_p^p where
    c_ratio = c_right/c_left.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    if left.ndim != 2 or right.ndim != 2 or left.shape[1] != right.shape[0]:
        raise ShapeError(
            f"pair shapes do not compose: left {left.shape} vs right {right.shape}"
        )
    if c_ratio <= 0:
        raise ValueError("c_ratio must be > 0")
    lnorm = pnorm_cols(left, p)
    rnorm = pnorm_rows(right, p)
    if not (np.all(np.isfinite(lnorm)) and np.all(np.isfinite(rnorm))):
        raise NumericError("weight norms overflowed; weights are too large to balance")
    where = f" ({label})" if label else ""
    for side, norms in (("incoming", lnorm), ("outgoing", rnorm)):
        dead = np.flatnonzero(norms == 0)
        if dead.size:
            raise DisconnectedNeuronError(
                f"hidden unit {dead[0]}{where} has zero {side} weight norm; "
                "every hidden unit needs at least one nonzero incoming and "
                "outgoing weight"
            )
    d = np.sqrt(rnorm / lnorm)
    if c_ratio != 1.0:
        d = d * c_ratio ** (1.0 / (2.0 * p))
    return d


def apply_pair_rescaling(left, right, bias_left, d):
    """Scale columns of ``left`` by d, rows of ``right`` by 1/d and
    ``bias_left`` by d. Leaves inputs untouched; the matrix product
    left@right is unchanged."""
    d = _check_positive(d)
    left2 = scale_cols(left, d)
    right2 = scale_rows(right, 1.0 / d)
    bias2 = None
    if bias_left is not None:
        bias_left = np.asarray(bias_left)
        if bias_left.shape != d.shape:
            raise ShapeError(f"bias shape {bias_left.shape} != coefficients {d.shape}")
        bias2 = (bias_left * d).astype(bias_left.dtype, copy=False)
    return left2, right2, bias2


def conv_pair_update(conv_k, conv_k1, bias_k=None, p=2.0, c_ratio=1.0):
    """Pair update for two consecutive conv tensors on their shared channel
    axis. Returns (rescaled conv_k, rescaled conv_k1, rescaled bias, d).
    The composed two-layer function is preserved for any stride/padding;
    with 1x1 kernels on both sides this is exactly the fully-connected
    update."""
    conv_k = np.asarray(conv_k)
    conv_k1 = np.asarray(conv_k1)
    if conv_k.ndim != 4 or conv_k1.ndim != 4 or conv_k.shape[0] != conv_k1.shape[1]:
        raise ShapeError(
            f"conv pair channels do not compose: {conv_k.shape} vs {conv_k1.shape}"
        )
    left = conv_to_left_matrix(conv_k)
    right = conv_to_right_matrix(conv_k1)
    d = pair_coefficients(left, right, p, c_ratio)
    left2, right2, bias2 = apply_pair_rescaling(left, right, bias_k, d)
    return (
        conv_from_left_matrix(left2, conv_k.shape),
        conv_from_right_matrix(right2, conv_k1.shape),
        bias2,
        d,
    )


def block_equivalent_weight(block):
    """Surrogate conv tensor standing in for a residual block when computing
    inter-unit coefficients: the channel-aligned union of the conv1 and
    conv_skip coefficients, stacked along a flat kernel axis. Its per-channel
    norms are the norms over both branches' coefficients touching that
    channel. Never executed in a forward pass."""
    c1 = block.conv1.weight
    sk = block.conv_skip.weight
    if c1.shape[0] != sk.shape[0] or c1.shape[1] != sk.shape[1]:
        raise ShapeError(
            f"block branches disagree on channels: conv1 {c1.shape} vs skip {sk.shape}"
        )
    out_c, in_c = c1.shape[0], c1.shape[1]
    flat = np.concatenate(
        [c1.reshape(out_c, in_c, -1), sk.reshape(out_c, in_c, -1)], axis=2
    )
    return flat[:, :, :, None]


def balance_resblock(prev_d, block, next_d, p=2.0):
    """Rescale one residual block in place: conv1 and conv_skip are
    left-rescaled with the incoming boundary coefficients, conv2 and
    conv_skip right-rescaled with the outgoing ones, and the internal
    conv1/conv2 pair is brought to its two-layer optimum. Each step
    preserves the wrapped function on its own, so the internal update runs
    last to leave the pair exactly balanced. Returns the internal
    coefficients. For inputs scaled per channel by prev_d, the rescaled
    block's outputs are the original outputs scaled by next_d."""
    prev_d = _check_positive(prev_d)
    next_d = _check_positive(next_d)
    if prev_d.shape[0] != block.conv1.weight.shape[1]:
        raise ShapeError("prev_d length does not match block input channels")
    if next_d.shape[0] != block.conv2.weight.shape[0]:
        raise ShapeError("next_d length does not match block output channels")
    _scale_in(block, prev_d, 1)
    _scale_out(block, next_d)
    left = conv_to_left_matrix(block.conv1.weight)
    right = conv_to_right_matrix(block.conv2.weight)
    d = pair_coefficients(left, right, p, label="inside residual block")
    _scale_out(block.conv1, d)
    _scale_in(block.conv2, d, 1)
    return d


def asymmetric_coefficients(mode, layer_sizes, p=2.0):
    """Per-layer weights c_k for a fully-connected width chain
    [n_0, ..., n_q]: uniform gives c^(p*(q-k)), adaptive gives
    1/(n_{k-1}*n_k), off gives ones."""
    q = len(layer_sizes) - 1
    if q < 2:
        raise ValueError("need at least two layers for asymmetric weighting")
    if mode.mode == "off":
        return [1.0] * q
    if mode.mode == "uniform":
        return [mode.c ** (p * (q - k)) for k in range(1, q + 1)]
    return [1.0 / (layer_sizes[k - 1] * layer_sizes[k]) for k in range(1, q + 1)]


# ---------------------------------------------------------------------------
# sweep plan: units, boundaries and block-internal slots


@dataclass
class _Unit:
    index: int  # position in net.layers
    layer: object


@dataclass
class _Slot:
    kind: str  # "boundary" | "block"
    left: _Unit
    right: Optional[_Unit]  # None for block slots
    width: int
    repeat: int  # right-side rows per boundary coordinate (flatten expansion)
    c_ratio: float = 1.0


def _out_width(layer):
    if isinstance(layer, Linear):
        return layer.weight.shape[1]
    if isinstance(layer, Conv2d):
        return layer.weight.shape[0]
    return layer.conv2.weight.shape[0]


def _in_width(layer):
    if isinstance(layer, Linear):
        return layer.weight.shape[0]
    if isinstance(layer, Conv2d):
        return layer.weight.shape[1]
    return layer.conv1.weight.shape[1]


def _unit_cs(units, p, mode):
    q = len(units)
    cs = []
    for k, u in enumerate(units, start=1):
        if isinstance(u.layer, ResBlockC) or mode.mode == "off":
            cs.append(1.0)
        elif mode.mode == "uniform":
            cs.append(mode.c ** (p * (q - k)))
        else:  # adaptive: inverse of the weight-matrix size
            cs.append(1.0 / u.layer.weight.size)
    return cs


def _plan(net, p=2.0, mode=None):
    """Sweep slots in left-to-right order: each inter-unit boundary, with a
    block's internal conv1/conv2 pair updated right after the block's input
    boundary (and before its output boundary)."""
    mode = mode or Asymmetric.off()
    units = [
        _Unit(i, layer)
        for i, layer in enumerate(net.layers)
        if isinstance(layer, PARAMETERIZED)
    ]
    if not units:
        raise ShapeError("network has no parameterized layers")
    cs = _unit_cs(units, p, mode)
    slots = []
    for j in range(len(units) - 1):
        lu, ru = units[j], units[j + 1]
        if isinstance(lu.layer, ResBlockC):
            slots.append(_Slot("block", lu, None, lu.layer.conv1.weight.shape[0], 1))
        width = _out_width(lu.layer)
        in_w = _in_width(ru.layer)
        if isinstance(ru.layer, Linear):
            if in_w % width:
                raise ShapeError(
                    f"boundary between layers {lu.index} and {ru.index} does not "
                    f"compose: {width} channels cannot group {in_w} features"
                )
            repeat = in_w // width
        else:
            if in_w != width:
                raise ShapeError(
                    f"boundary between layers {lu.index} and {ru.index} does not "
                    f"compose: {width} vs {in_w} channels"
                )
            repeat = 1
        blocky = isinstance(lu.layer, ResBlockC) or isinstance(ru.layer, ResBlockC)
        ratio = 1.0 if blocky else cs[j + 1] / cs[j]
        slots.append(_Slot("boundary", lu, ru, width, repeat, ratio))
    last = units[-1]
    if isinstance(last.layer, ResBlockC):
        slots.append(_Slot("block", last, None, last.layer.conv1.weight.shape[0], 1))
    return units, slots


def _left_matrix(layer):
    if isinstance(layer, Linear):
        return layer.weight
    if isinstance(layer, Conv2d):
        return conv_to_left_matrix(layer.weight)
    return conv_to_left_matrix(block_equivalent_weight(layer))


def _right_matrix(layer, width, repeat):
    if isinstance(layer, Linear):
        w = layer.weight
        return w if repeat == 1 else w.reshape(width, repeat * w.shape[1])
    if isinstance(layer, Conv2d):
        return conv_to_right_matrix(layer.weight)
    return conv_to_right_matrix(block_equivalent_weight(layer))


def _slot_matrices(slot):
    if slot.kind == "block":
        block = slot.left.layer
        return conv_to_left_matrix(block.conv1.weight), conv_to_right_matrix(
            block.conv2.weight
        )
    return (
        _left_matrix(slot.left.layer),
        _right_matrix(slot.right.layer, slot.width, slot.repeat),
    )


def _slot_label(slot):
    if slot.kind == "block":
        return f"inside block at layer {slot.left.index}"
    return f"boundary between layers {slot.left.index} and {slot.right.index}"


# ---------------------------------------------------------------------------
# applying coefficients to live layers and to gradient-shaped dicts


def _mul(arr, factor):
    return (arr * factor).astype(arr.dtype, copy=False)


def _scale_out(layer, d):
    """Multiply a unit's outgoing weights (and bias) by d per channel."""
    if isinstance(layer, Linear):
        layer.weight = _mul(layer.weight, d[None, :])
        if layer.bias is not None:
            layer.bias = _mul(layer.bias, d)
    elif isinstance(layer, Conv2d):
        layer.weight = _mul(layer.weight, d[:, None, None, None])
        if layer.bias is not None:
            layer.bias = _mul(layer.bias, d)
    else:
        _scale_out(layer.conv2, d)
        _scale_out(layer.conv_skip, d)


def _scale_in(layer, d, repeat):
    """Divide a unit's incoming weights by d per channel."""
    if isinstance(layer, Linear):
        dd = np.repeat(d, repeat) if repeat > 1 else d
        layer.weight = _mul(layer.weight, 1.0 / dd[:, None])
    elif isinstance(layer, Conv2d):
        layer.weight = _mul(layer.weight, 1.0 / d[None, :, None, None])
    else:
        _scale_in(layer.conv1, d, 1)
        _scale_in(layer.conv_skip, d, 1)


def _apply_slot(slot, d):
    if slot.kind == "block":
        block = slot.left.layer
        _scale_out(block.conv1, d)
        _scale_in(block.conv2, d, 1)
    else:
        _scale_out(slot.left.layer, d)
        _scale_in(slot.right.layer, d, slot.repeat)


def apply_rescaling(net, ds):
    """Apply given per-slot positive coefficients to the network in place.

    Slots follow the order produced by one sweep (see :func:`enorm_cycle`);
    the network function is exactly preserved for any positive choice."""
    _, slots = _plan(net)
    if len(ds) != len(slots):
        raise ShapeError(f"expected {len(slots)} coefficient vectors, got {len(ds)}")
    for slot, d in zip(slots, ds):
        d = _check_positive(d)
        if d.shape[0] != slot.width:
            raise ShapeError(
                f"{_slot_label(slot)} has width {slot.width}, got {d.shape[0]}"
            )
        _apply_slot(slot, d)


def random_rescalings(net, rng, lo=0.1, hi=10.0):
    """Log-uniform positive coefficients for every rescalable slot."""
    _, slots = _plan(net)
    return [
        np.exp(rng.uniform(np.log(lo), np.log(hi), size=slot.width)) for slot in slots
    ]


def _grad_scale_out(grads, prefix, layer, d):
    """Gradient-law counterpart of _scale_out: outgoing-side gradients and
    bias gradients are divided by d."""
    if isinstance(layer, Linear):
        grads[f"{prefix}.weight"] = _mul(grads[f"{prefix}.weight"], 1.0 / d[None, :])
        if f"{prefix}.bias" in grads:
            grads[f"{prefix}.bias"] = _mul(grads[f"{prefix}.bias"], 1.0 / d)
    elif isinstance(layer, Conv2d):
        grads[f"{prefix}.weight"] = _mul(
            grads[f"{prefix}.weight"], 1.0 / d[:, None, None, None]
        )
        if f"{prefix}.bias" in grads:
            grads[f"{prefix}.bias"] = _mul(grads[f"{prefix}.bias"], 1.0 / d)
    else:
        _grad_scale_out(grads, f"{prefix}.conv2", layer.conv2, d)
        _grad_scale_out(grads, f"{prefix}.conv_skip", layer.conv_skip, d)


def _grad_scale_in(grads, prefix, layer, d, repeat):
    if isinstance(layer, Linear):
        dd = np.repeat(d, repeat) if repeat > 1 else d
        grads[f"{prefix}.weight"] = _mul(grads[f"{prefix}.weight"], dd[:, None])
    elif isinstance(layer, Conv2d):
        grads[f"{prefix}.weight"] = _mul(
            grads[f"{prefix}.weight"], d[None, :, None, None]
        )
    else:
        _grad_scale_in(grads, f"{prefix}.conv1", layer.conv1, d, 1)
        _grad_scale_in(grads, f"{prefix}.conv_skip", layer.conv_skip, d, 1)


def rescale_momentum(net, buffers, ds):
    """Transform gradient-shaped buffers (momentum, raw gradients) with the
    same coefficients a rescaling applied to the weights: left boundary
    multiplies rows, right boundary divides columns, bias buffers divide.
    Mutates and returns ``buffers``."""
    _, slots = _plan(net)
    if len(ds) != len(slots):
        raise ShapeError(f"expected {len(slots)} coefficient vectors, got {len(ds)}")
    for slot, d in zip(slots, ds):
        d = _check_positive(d)
        if slot.kind == "block":
            block = slot.left.layer
            pre = str(slot.left.index)
            _grad_scale_out(buffers, f"{pre}.conv1", block.conv1, d)
            _grad_scale_in(buffers, f"{pre}.conv2", block.conv2, d, 1)
        else:
            _grad_scale_out(buffers, str(slot.left.index), slot.left.layer, d)
            _grad_scale_in(
                buffers, str(slot.right.index), slot.right.layer, d, slot.repeat
            )
    return buffers


# ---------------------------------------------------------------------------
# cycles and full balance runs


def validate_connectivity(net, p=2.0):
    """Check that every rescalable channel has nonzero incoming and outgoing
    norms, so a sweep cannot fail halfway through and leave the network
    partially rescaled."""
    _, slots = _plan(net)
    for slot in slots:
        left, right = _slot_matrices(slot)
        pair_coefficients(left, right, p, 1.0, label=_slot_label(slot))


def _cycle(slots, p, ds_out=None):
    ds = []
    for slot in slots:
        left, right = _slot_matrices(slot)
        d = pair_coefficients(left, right, p, slot.c_ratio, label=_slot_label(slot))
        _apply_slot(slot, d)
        ds.append(d)
    return ds


def weighted_lp_norm(net, p=2.0, mode=None):
    """Sum over layers of c_k * (entrywise p-norm of W_k)^p; biases excluded.
    Block tensors always carry weight 1 (depth weighting is restricted to
    sequential segments)."""
    mode = mode or Asymmetric.off()
    units = [l for l in net.layers if isinstance(l, PARAMETERIZED)]
    cs = _unit_cs([_Unit(i, l) for i, l in enumerate(units)], p, mode)
    total = 0.0
    for c, layer in zip(cs, units):
        if isinstance(layer, ResBlockC):
            for conv in (layer.conv1, layer.conv2, layer.conv_skip):
                total += np.sum(np.abs(conv.weight, dtype=np.float64) ** p)
        else:
            total += c * np.sum(np.abs(layer.weight, dtype=np.float64) ** p)
    return float(total)


def _writeback(net, work):
    src = dict(named_parameters(work))
    for name, arr in named_parameters(net):
        arr[...] = src[name].astype(arr.dtype, copy=False)


def enorm_cycle(net, p=2.0, mode=None):
    """One full left-to-right sweep. Mutates the network in place and
    returns the per-slot coefficient vectors it applied (needed to transform
    momentum buffers)."""
    mode = mode or Asymmetric.off()
    if network_dtype(net) == np.float64:
        _, slots = _plan(net, p, mode)
        return _cycle(slots, p)
    work = copy_network(net, np.float64)
    _, slots = _plan(work, p, mode)
    ds = _cycle(slots, p)
    _writeback(net, work)
    return ds


def run_cycles(net, n_cycles, p=2.0, mode=None):
    """Run ``n_cycles`` sweeps, returning the per-slot elementwise product of
    all applied coefficients (diagonal rescalings compose multiplicatively)."""
    mode = mode or Asymmetric.off()
    work = copy_network(net, np.float64)
    _, slots = _plan(work, p, mode)
    total = [np.ones(slot.width) for slot in slots]
    for _ in range(n_cycles):
        for t, d in zip(total, _cycle(slots, p)):
            t *= d
    _writeback(net, work)
    return total


def balance(net, p=2.0, mode=None, max_cycles=100, tol=1e-9):
    """Iterate sweeps until every coefficient is within ``tol`` of 1 or
    ``max_cycles`` is reached. Mutates the network in place toward the
    canonical minimum-norm representative and reports the per-cycle norm
    trace. Non-convergence is reported, not raised."""
    mode = mode or Asymmetric.off()
    validate_connectivity(net, p)
    work = copy_network(net, np.float64)
    _, slots = _plan(work, p, mode)
    lp = [weighted_lp_norm(work, p, mode)]
    if not slots:
        return BalanceReport(0, lp, 0.0, True)
    cycles = 0
    devs = []
    converged = False
    while cycles < max_cycles:
        ds = _cycle(slots, p)
        cycles += 1
        lp.append(weighted_lp_norm(work, p, mode))
        devs.append(max(float(np.max(np.abs(d - 1.0))) for d in ds))
        if devs[-1] < tol:
            converged = True
            break
    _writeback(net, work)
    return BalanceReport(cycles, lp, devs[-1], converged, devs)
