"""SGD-with-momentum training that interleaves rebalancing cycles.

Each step runs: update learning rate, forward, backward, SGD update, then
the configured number of rebalancing cycles, and finally transforms the
momentum buffers with the same coefficients (a rescaling is a jump in
parameter space, so buffers must follow the gradient transformation law:
rows times d at the input boundary, columns divided by d at the output
boundary, bias buffers divided by d).

The implicit variant skips the explicit cycles and instead treats the
rescaling coefficients as learnable: the optimized loss is the task loss
plus lambda times the rescaled-weight squared norm, whose derivatives with
respect to both the weights and the coefficients are analytic.
"""

import time
from dataclasses import dataclass, field
from math import ceil
from typing import Optional

import numpy as np

from .balance import Asymmetric, rescale_momentum, run_cycles, weighted_lp_norm
from .errors import DivergenceError, NumericError, ShapeError
from .network import (
    PARAMETERIZED,
    Linear,
    backward,
    forward,
    named_parameters,
    network_dtype,
)


@dataclass
class TrainConfig:
    learning_rate: float
    schedule: str = "constant"  # constant | linear | quadratic
    lr_end: float = 0.0
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 1
    enorm_cycles_per_step: int = 1
    asymmetric: Asymmetric = field(default_factory=Asymmetric.off)
    p: float = 2.0
    seed: int = 0
    implicit_lambda: float = 0.0
    implicit_lr: Optional[float] = None  # None shares the scheduled rate

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.schedule not in ("constant", "linear", "quadratic"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.enorm_cycles_per_step < 0:
            raise ValueError("enorm_cycles_per_step must be >= 0")
        if self.implicit_lambda < 0:
            raise ValueError("implicit_lambda must be >= 0")
        if self.enorm_cycles_per_step > 0 and self.implicit_lambda > 0:
            raise ValueError(
                "explicit cycles and implicit mode are alternatives; "
                "set enorm_cycles_per_step=0 when implicit_lambda > 0"
            )


@dataclass
class OptimizerState:
    momentum: dict  # parameter name -> buffer, same shape as the parameter
    delta: Optional[list] = None  # implicit mode: one positive vector per boundary
    delta_momentum: Optional[list] = None


@dataclass
class MetricsRow:
    step: int
    epoch: int
    lr: float
    train_loss: float
    global_l2_norm: float
    wall_ms: float


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    accuracy: Optional[float]  # classification only
    energy: list  # (tensor label, per-unit column norms) at epoch end


def lr_at(schedule, step, total_steps, lr0, lr_end=0.0):
    """Learning rate at a given step: constant, linear decay to lr_end, or
    quadratic decay to lr_end."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule == "constant":
        return lr0
    f = step / total_steps if total_steps else 0.0
    if schedule == "linear":
        return lr0 + (lr_end - lr0) * f
    if schedule == "quadratic":
        return lr_end + (lr0 - lr_end) * (1.0 - f) ** 2
    raise ValueError(f"unknown schedule {schedule!r}")


def _linear_units(net):
    units = [
        (i, layer) for i, layer in enumerate(net.layers) if isinstance(layer, PARAMETERIZED)
    ]
    if any(not isinstance(layer, Linear) for _, layer in units):
        raise ShapeError("implicit mode supports fully-connected networks only")
    return units


def init_optimizer_state(net, config):
    buffers = {name: np.zeros_like(arr) for name, arr in named_parameters(net)}
    delta = delta_momentum = None
    if config.implicit_lambda > 0:
        units = _linear_units(net)
        delta = [np.ones(layer.weight.shape[1]) for _, layer in units[:-1]]
        delta_momentum = [np.zeros_like(d) for d in delta]
    return OptimizerState(buffers, delta, delta_momentum)


def sgd_step(net, grads, state, config, step_index, total_steps):
    """Heavy-ball update: v <- momentum*v + grad + weight_decay*w, then
    w <- w - lr*v. Mutates parameters and buffers in place."""
    lr = lr_at(config.schedule, step_index, total_steps, config.learning_rate, config.lr_end)
    for name, param in named_parameters(net):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at step {step_index}")
        buf = state.momentum[name]
        buf *= config.momentum
        if config.weight_decay:
            buf += g + config.weight_decay * param
        else:
            buf += g
        param -= lr * buf
        if not np.all(np.isfinite(param)):
            raise DivergenceError(f"non-finite parameter {name} at step {step_index}")


def implicit_enorm_gradients(net, delta, lam, p=2):
    """Analytic derivatives of lam * (squared norm of the rescaled weights)
    with respect to the weights and the rescaling coefficients. The task
    loss contributes nothing to the coefficient gradients, so they are
    purely these regularizer terms. Biases are excluded from the norm."""
    if p != 2:
        raise ValueError("implicit mode is defined for p=2 only")
    units = _linear_units(net)
    q = len(units)
    if len(delta) != q - 1:
        raise ShapeError(f"expected {q - 1} coefficient vectors, got {len(delta)}")
    for d in delta:
        if not np.all(np.asarray(d) > 0):
            raise ValueError("rescaling coefficients must stay strictly positive")
    theta = {}
    for k, (i, layer) in enumerate(units):
        w = layer.weight
        dl = delta[k - 1] if k > 0 else np.ones(w.shape[0])
        dr = delta[k] if k < q - 1 else np.ones(w.shape[1])
        scale = (dr[None, :] / dl[:, None]) ** 2
        theta[f"{i}.weight"] = (2.0 * lam) * w * scale
    dgrads = []
    for l in range(q - 1):
        wl = units[l][1].weight.astype(np.float64)
        wr = units[l + 1][1].weight.astype(np.float64)
        dprev = delta[l - 1] if l > 0 else np.ones(wl.shape[0])
        dnext = delta[l + 1] if l < q - 2 else np.ones(wr.shape[1])
        d = np.asarray(delta[l], dtype=np.float64)
        a = (wl**2 / (dprev**2)[:, None]).sum(axis=0)  # incoming energy per unit
        b = (wr**2 * (dnext**2)[None, :]).sum(axis=1)  # outgoing energy per unit
        dgrads.append(lam * (2.0 * d * a - 2.0 * b / d**3))
    return theta, dgrads


def _regression_loss(preds, targets):
    r = preds - targets
    loss = float(np.mean(r.astype(np.float64) ** 2))
    return loss, (2.0 / r.size) * r


def _classification_loss(preds, labels):
    z = preds - preds.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def shape_batch(x, input_shape):
    """Reshape raw dataset samples to what the network expects: flat inputs
    for 1D input shapes, a channel axis added for (c, h, w) shapes."""
    if len(input_shape) == 1:
        x = x.reshape(len(x), -1)
    elif x.ndim == 3:
        x = x[:, None, :, :]
    if x.shape[1:] != tuple(input_shape):
        raise ShapeError(f"dataset samples {x.shape[1:]} do not fit input {input_shape}")
    return x


def _delta_step(state, dgrads, lr, momentum, step_index):
    for l, g in enumerate(dgrads):
        buf = state.delta_momentum[l]
        buf *= momentum
        buf += g
        state.delta[l] = state.delta[l] - lr * buf
        if not np.all(state.delta[l] > 0):
            raise DivergenceError(
                f"rescaling coefficient became non-positive at step {step_index}; "
                "lower the coefficient learning rate or lambda"
            )


def _epoch_energy(net):
    # local import: diagnostics builds on balance, not the other way round
    from .diagnostics import energy_profile

    return energy_profile(net).norms


def train_loop(net, data, config):
    """Train the network on a dataset, mutating it in place.

    Returns (per-step metrics rows, per-epoch stats). Deterministic given
    the config seed: data order, every update and all logged numbers except
    wall-clock timings repeat bit-identically.
    """
    config.validate()
    dtype = network_dtype(net)
    inputs = np.asarray(data.inputs, dtype=dtype)
    targets = np.asarray(data.targets)
    if data.kind == "regression":
        targets = targets.astype(dtype)
        loss_fn = _regression_loss
    elif data.kind == "classification":
        targets = targets.astype(np.int64)
        loss_fn = _classification_loss
    else:
        raise ValueError(f"unknown dataset kind {data.kind!r}")
    implicit = config.implicit_lambda > 0
    state = init_optimizer_state(net, config)
    rng = np.random.default_rng(config.seed)
    n = len(inputs)
    steps_per_epoch = ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    metrics = []
    epoch_stats = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        correct = 0
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size : (s + 1) * config.batch_size]
            x = shape_batch(inputs[idx], net.input_shape)
            y = targets[idx]
            t0 = time.perf_counter()
            lr = lr_at(
                config.schedule, step, total_steps, config.learning_rate, config.lr_end
            )
            preds = forward(net, x)
            loss, loss_grad = loss_fn(preds, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            grads = backward(net, x, loss_grad)
            if implicit:
                theta_g, delta_g = implicit_enorm_gradients(
                    net, state.delta, config.implicit_lambda
                )
                for name, g in theta_g.items():
                    grads[name] = grads[name] + g
            sgd_step(net, grads, state, config, step, total_steps)
            if implicit:
                d_lr = config.implicit_lr if config.implicit_lr is not None else lr
                _delta_step(state, delta_g, d_lr, config.momentum, step)
            if config.enorm_cycles_per_step:
                try:
                    ds = run_cycles(
                        net, config.enorm_cycles_per_step, config.p, config.asymmetric
                    )
                except NumericError as exc:
                    raise DivergenceError(f"step {step}: {exc}")
                rescale_momentum(net, state.momentum, ds)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            metrics.append(
                MetricsRow(step, epoch, lr, loss, weighted_lp_norm(net, 2.0), wall_ms)
            )
            losses.append(loss)
            if data.kind == "classification":
                correct += int(np.sum(preds.argmax(axis=1) == y))
            step += 1
        accuracy = correct / n if data.kind == "classification" else None
        epoch_stats.append(
            EpochStats(epoch, float(np.mean(losses)), accuracy, _epoch_energy(net))
        )
    return metrics, epoch_stats
