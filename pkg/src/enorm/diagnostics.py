"""Measurement and verification utilities: global norms, per-unit energy
profiles, functional-equivalence checks against random probe batches, and
the canonicalization check (balancing any random rescaling of a network
lands on the same weights).
"""

from dataclasses import dataclass

import numpy as np

from .balance import (
    Asymmetric,
    apply_rescaling,
    balance,
    random_rescalings,
    weighted_lp_norm,
)
from .errors import ShapeError
from .network import (
    PARAMETERIZED,
    Conv2d,
    Flatten,
    Linear,
    ResBlockC,
    copy_network,
    forward_trace,
    infer_shapes,
    named_parameters,
    network_dtype,
)
from .tensor_ops import pnorm_cols


@dataclass
class EnergyProfile:
    """Per-unit column norms of every weight tensor: one (label, vector)
    entry per tensor, conv filters flattened per output channel. Depends on
    weights only, never on data."""

    norms: list


@dataclass
class EquivalenceVerdict:
    max_abs_output_diff: float
    max_abs_activation_diff_per_layer: list
    passed: bool


@dataclass
class CanonicalizationReport:
    passed: bool
    max_rel_deviation: float
    all_converged: bool


def global_lp_norm(net, p=2.0, mode=None):
    """Sum over layers of c_k times the entrywise p-norm of the weights
    raised to p (biases excluded); c_k is 1 everywhere when weighting is
    off."""
    return weighted_lp_norm(net, p, mode or Asymmetric.off())


def _filter_norms(weight):
    flat = weight.reshape(weight.shape[0], -1)
    return np.sqrt(np.einsum("ij,ij->i", flat, flat, dtype=np.float64))


def energy_profile(net):
    norms = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Linear):
            norms.append((f"{i}.weight", pnorm_cols(layer.weight, 2.0)))
        elif isinstance(layer, Conv2d):
            norms.append((f"{i}.weight", _filter_norms(layer.weight)))
        elif isinstance(layer, ResBlockC):
            for sub in ("conv1", "conv2", "conv_skip"):
                norms.append(
                    (f"{i}.{sub}.weight", _filter_norms(getattr(layer, sub).weight))
                )
    return EnergyProfile(norms)


def _check_same_architecture(net_a, net_b):
    if tuple(net_a.input_shape) != tuple(net_b.input_shape):
        raise ShapeError("input shapes differ")
    if len(net_a.layers) != len(net_b.layers):
        raise ShapeError("layer counts differ")
    pa, pb = named_parameters(net_a), named_parameters(net_b)
    if [(n, a.shape) for n, a in pa] != [(n, b.shape) for n, b in pb]:
        raise ShapeError("parameter structures differ")


def _expected_scales(net, rescalings):
    """Per-layer scale vectors that net_b activations should carry relative
    to net_a when net_b = rescaling(net_a): the boundary coefficients of the
    nearest parameterized layer to the left, expanded across flatten."""
    from .balance import _plan  # layout of boundary slots

    _, slots = _plan(net)
    boundary_ds = [
        d for slot, d in zip(slots, rescalings) if slot.kind == "boundary"
    ]
    unit_positions = [
        i for i, l in enumerate(net.layers) if isinstance(l, PARAMETERIZED)
    ]
    shapes = infer_shapes(net)
    scales = []
    cur = None  # None means ones
    seen_units = 0
    for i, layer in enumerate(net.layers):
        if isinstance(layer, PARAMETERIZED):
            if seen_units < len(boundary_ds):
                cur = np.asarray(boundary_ds[seen_units], dtype=np.float64)
            else:
                cur = None  # last unit: identity boundary
            seen_units += 1
        elif isinstance(layer, Flatten) and cur is not None:
            cur = np.repeat(cur, shapes[i][0] // cur.shape[0])
        scales.append(cur)
    return scales


def _apply_scale(act, scale):
    if scale is None:
        return act
    if act.ndim == 2:
        return act / scale[None, :]
    return act / scale[None, :, None, None]


def check_equivalence(net_a, net_b, inputs, tol, rescalings=None):
    """Compare outputs (and, when the rescaling that produced net_b from
    net_a is supplied, every intermediate activation divided by its known
    scale) on a probe batch."""
    _check_same_architecture(net_a, net_b)
    trace_a = forward_trace(net_a, np.asarray(inputs, dtype=network_dtype(net_a)))
    trace_b = forward_trace(net_b, np.asarray(inputs, dtype=network_dtype(net_b)))
    scales = (
        _expected_scales(net_a, rescalings)
        if rescalings is not None
        else [None] * len(net_a.layers)
    )
    per_layer = [
        float(np.max(np.abs(_apply_scale(b, s) - a)))
        for a, b, s in zip(trace_a, trace_b, scales)
    ]
    out_diff = per_layer[-1]
    passed = out_diff <= tol
    if rescalings is not None:
        passed = passed and all(d <= tol for d in per_layer)
    return EquivalenceVerdict(out_diff, per_layer, passed)


def random_probe_inputs(net, seed, n=100):
    """Standard-normal probe batch in the network's dtype. ReLU networks are
    piecewise linear, so random probes expose scaling errors with high
    probability."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, *net.input_shape))
    return x.astype(network_dtype(net))


def _max_rel_distance(ref, other):
    worst = 0.0
    pb = dict(named_parameters(other))
    for name, a in named_parameters(ref):
        b = pb[name]
        denom = max(float(np.linalg.norm(a.ravel())), 1e-30)
        worst = max(worst, float(np.linalg.norm((a - b).ravel())) / denom)
    return worst


def canonicalization_check(
    net, n_rescalings=5, seed=0, tol=1e-6, p=2.0, max_cycles=100, balance_tol=1e-9
):
    """Balance the network and n random positive rescalings of it
    (log-uniform coefficients in [0.1, 10]); all must converge to the same
    weights within a relative Frobenius distance of tol per tensor."""
    rng = np.random.default_rng(seed)
    ref = copy_network(net)
    report = balance(ref, p, max_cycles=max_cycles, tol=balance_tol)
    all_converged = report.converged
    worst = 0.0
    for _ in range(n_rescalings):
        variant = copy_network(net)
        apply_rescaling(variant, random_rescalings(variant, rng))
        report = balance(variant, p, max_cycles=max_cycles, tol=balance_tol)
        all_converged = all_converged and report.converged
        worst = max(worst, _max_rel_distance(ref, variant))
    return CanonicalizationReport(all_converged and worst < tol, worst, all_converged)
