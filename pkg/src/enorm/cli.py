"""Command-line surface.

Subcommands:
  balance  --net PATH --p F --cycles N --tol F [--uniform-c F | --adaptive]
           --out PATH [--report CSV]
  train    --config PATH [--out DIR]
  inspect  --net PATH [--energy CSV] [--count-elements]
  check    --net-a PATH --net-b PATH [--tol F] [--seed N]
  canon    --net PATH [--rescalings N] [--seed N] [--tol F]

Exit codes: 0 success, 1 failed check, 2 usage or input error.

CSV schemas (all deterministic given seed and config; the wall_ms column of
metrics.csv is wall-clock time and is the one exception):
  balance report: cycle, lp_norm, max_dev   (cycle 0 is the initial state)
  metrics.csv:    step, epoch, lr, train_loss, global_l2_norm, wall_ms
  energy profile: layer, unit, norm
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .balance import Asymmetric, balance, weighted_lp_norm
from .datasets import load_idx_dataset, synth_dataset
from .diagnostics import (
    canonicalization_check,
    check_equivalence,
    energy_profile,
    random_probe_inputs,
)
from .errors import (
    ContainerFormatError,
    DatasetError,
    DisconnectedNeuronError,
    DivergenceError,
    NumericError,
    ShapeError,
)
from .architectures import fc_network
from .network import count_normalized_elements, network_dtype
from .serialize import load_network, save_network
from .training import TrainConfig, train_loop

_INPUT_ERRORS = (
    ShapeError,
    NumericError,
    DisconnectedNeuronError,
    ContainerFormatError,
    DatasetError,
    ValueError,
    OSError,
)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# run configuration for `train`

_RUN_KEYS = {
    # key: (required, default)
    "learning_rate": (True, None),
    "schedule": (False, "constant"),
    "lr_end": (False, 0.0),
    "momentum": (False, 0.0),
    "weight_decay": (False, 0.0),
    "batch_size": (True, None),
    "epochs": (True, None),
    "enorm_cycles_per_step": (False, 1),
    "p": (False, 2.0),
    "asymmetric_mode": (False, "off"),
    "asymmetric_c": (False, 1.0),
    "seed": (False, 0),
    "implicit_lambda": (False, 0.0),
    "implicit_lr": (False, None),
    "dataset_kind": (True, None),
    "dataset_n": (False, 1000),
    "dataset_dims": (False, 32),
    "dataset_out_dim": (False, None),
    "images_path": (False, None),
    "labels_path": (False, None),
    "arch": (False, None),
    "net_path": (False, None),
    "init_seed": (False, 0),
    "output_dir": (False, None),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key)


def parse_run_config(doc):
    if not isinstance(doc, dict):
        raise ValueError("run config must be a flat JSON object")
    unknown = sorted(set(doc) - set(_RUN_KEYS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    missing = sorted(k for k, (req, _) in _RUN_KEYS.items() if req and k not in doc)
    if missing:
        raise ValueError(f"missing required config keys: {', '.join(missing)}")
    values = {k: doc.get(k, default) for k, (_, default) in _RUN_KEYS.items()}
    if (values["arch"] is None) == (values["net_path"] is None):
        raise ValueError("config needs exactly one of 'arch' or 'net_path'")
    if values["dataset_kind"] not in ("synth_regression", "synth_classification", "idx"):
        raise ValueError(f"unknown dataset_kind {values['dataset_kind']!r}")
    if values["dataset_kind"] == "idx" and not (
        values["images_path"] and values["labels_path"]
    ):
        raise ValueError("idx datasets need images_path and labels_path")
    return RunConfig(values)


def _run_train_config(run):
    mode = Asymmetric(run.asymmetric_mode, run.asymmetric_c)
    return TrainConfig(
        learning_rate=run.learning_rate,
        schedule=run.schedule,
        lr_end=run.lr_end,
        momentum=run.momentum,
        weight_decay=run.weight_decay,
        batch_size=run.batch_size,
        epochs=run.epochs,
        enorm_cycles_per_step=run.enorm_cycles_per_step,
        asymmetric=mode,
        p=run.p,
        seed=run.seed,
        implicit_lambda=run.implicit_lambda,
        implicit_lr=run.implicit_lr,
    )


def _build_net(run):
    if run.net_path is not None:
        return load_network(run.net_path)
    spec = run.arch
    if not spec.startswith("fc:"):
        raise ValueError(f"unknown arch {spec!r}; expected like 'fc:32-64-1'")
    widths = [int(w) for w in spec[3:].split("-")]
    return fc_network(widths, seed=run.init_seed)


def _load_dataset(run):
    if run.dataset_kind == "idx":
        return load_idx_dataset(run.images_path, run.labels_path)
    kind = "regression" if run.dataset_kind == "synth_regression" else "classification"
    return synth_dataset(
        kind, run.dataset_n, run.dataset_dims, run.seed, out_dim=run.dataset_out_dim
    )


def _write_energy_csv(path, norms):
    rows = []
    for label, vec in norms:
        for unit, value in enumerate(vec):
            rows.append((label, unit, _fmt(value)))
    _write_csv(path, ("layer", "unit", "norm"), rows)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_balance(args):
    net = load_network(args.net)
    if args.adaptive:
        mode = Asymmetric.adaptive()
    elif args.uniform_c is not None:
        mode = Asymmetric.uniform(args.uniform_c)
    else:
        mode = Asymmetric.off()
    report = balance(net, p=args.p, mode=mode, max_cycles=args.cycles, tol=args.tol)
    save_network(net, args.out)
    if args.report:
        rows = [(0, _fmt(report.lp_norm_per_cycle[0]), "")]
        for i in range(report.cycles_run):
            rows.append(
                (
                    i + 1,
                    _fmt(report.lp_norm_per_cycle[i + 1]),
                    _fmt(report.max_dev_per_cycle[i]),
                )
            )
        _write_csv(args.report, ("cycle", "lp_norm", "max_dev"), rows)
    status = "converged" if report.converged else "not converged"
    print(
        f"{status} after {report.cycles_run} cycles: lp_norm "
        f"{report.lp_norm_per_cycle[0]:.6g} -> {report.lp_norm_per_cycle[-1]:.6g}, "
        f"max |d-1| {report.max_coeff_deviation:.3g}"
    )
    return 0


def _cmd_train(args):
    with open(args.config) as f:
        run = parse_run_config(json.load(f))
    out_dir = args.out or run.output_dir
    if not out_dir:
        raise ValueError("no output directory: set --out or config output_dir")
    net = _build_net(run)
    data = _load_dataset(run)
    metrics, epochs = train_loop(net, data, _run_train_config(run))
    os.makedirs(out_dir, exist_ok=True)
    save_network(net, os.path.join(out_dir, "network.nwc"))
    _write_csv(
        os.path.join(out_dir, "metrics.csv"),
        ("step", "epoch", "lr", "train_loss", "global_l2_norm", "wall_ms"),
        [
            (m.step, m.epoch, _fmt(m.lr), _fmt(m.train_loss), _fmt(m.global_l2_norm), _fmt(m.wall_ms))
            for m in metrics
        ],
    )
    for stat in epochs:
        _write_energy_csv(
            os.path.join(out_dir, f"energy_epoch_{stat.epoch + 1:04d}.csv"), stat.energy
        )
        acc = "" if stat.accuracy is None else f", accuracy {stat.accuracy:.4f}"
        print(f"epoch {stat.epoch + 1}: loss {stat.mean_loss:.6g}{acc}")
    return 0


def _cmd_inspect(args):
    net = load_network(args.net)
    print(f"dtype={np.dtype(network_dtype(net)).name}")
    print(f"global_l2_norm={_fmt(weighted_lp_norm(net, 2.0))}")
    if args.energy:
        _write_energy_csv(args.energy, energy_profile(net).norms)
    if args.count_elements:
        print(f"normalized_elements={count_normalized_elements(net)}")
    return 0


def _cmd_check(args):
    net_a = load_network(args.net_a)
    net_b = load_network(args.net_b)
    probe = random_probe_inputs(net_a, args.seed)
    verdict = check_equivalence(net_a, net_b, probe, args.tol)
    print(
        f"max_abs_output_diff={_fmt(verdict.max_abs_output_diff)} "
        f"tol={_fmt(args.tol)} -> {'pass' if verdict.passed else 'FAIL'}"
    )
    return 0 if verdict.passed else 1


def _cmd_canon(args):
    net = load_network(args.net)
    report = canonicalization_check(
        net, n_rescalings=args.rescalings, seed=args.seed, tol=args.tol
    )
    print(
        f"max_rel_deviation={_fmt(report.max_rel_deviation)} tol={_fmt(args.tol)} "
        f"converged={report.all_converged} -> {'pass' if report.passed else 'FAIL'}"
    )
    return 0 if report.passed else 1


def _parser():
    parser = argparse.ArgumentParser(
        prog="enorm", description="Minimum-norm weight rebalancing for ReLU networks"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("balance", help="rebalance a network container")
    p.add_argument("--net", required=True)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--cycles", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-9)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--uniform-c", type=float, default=None)
    group.add_argument("--adaptive", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_balance)

    p = sub.add_parser("train", help="train per a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("inspect", help="print norms and element counts")
    p.add_argument("--net", required=True)
    p.add_argument("--energy", default=None)
    p.add_argument("--count-elements", action="store_true")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("check", help="verify two containers compute the same function")
    p.add_argument("--net-a", required=True)
    p.add_argument("--net-b", required=True)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("canon", help="check rescalings balance to identical weights")
    p.add_argument("--net", required=True)
    p.add_argument("--rescalings", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=_cmd_canon)
    return parser


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
