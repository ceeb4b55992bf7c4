"""Rebalance an artificially unbalanced deep MLP and dump the traces.

Builds a stack of Xavier-initialized 500x500 layers, multiplies one layer's
weights by 1.2 and another's by 0.8, then runs rebalancing cycles without
any training. Writes per-cycle global-norm data and per-cycle energy
profiles (column norms of every layer) for plotting.
"""

import argparse
import csv
import os

import numpy as np

from enorm import Linear, Network, ReLU, balance, energy_profile


def build_net(depth, width, seed, boost_layer, boost, damp_layer, damp):
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(depth):
        w = rng.uniform(-1.0, 1.0, (width, width)) * np.sqrt(6.0 / (2 * width))
        layers.append(Linear(w))
        if k < depth - 1:
            layers.append(ReLU())
    net = Network(layers, (width,))
    net.layers[(boost_layer - 1) * 2].weight *= boost
    net.layers[(damp_layer - 1) * 2].weight *= damp
    return net


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depth", type=int, default=20)
    ap.add_argument("--width", type=int, default=500)
    ap.add_argument("--cycles", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--boost-layer", type=int, default=6)
    ap.add_argument("--damp-layer", type=int, default=12)
    ap.add_argument("--out", default="rebalance_out")
    args = ap.parse_args()

    if not 1 <= args.boost_layer <= args.depth or not 1 <= args.damp_layer <= args.depth:
        ap.error("--boost-layer and --damp-layer must lie within --depth")
    net = build_net(
        args.depth, args.width, args.seed, args.boost_layer, 1.2, args.damp_layer, 0.8
    )
    os.makedirs(args.out, exist_ok=True)

    profiles = [energy_profile(net).norms]
    report = None
    for c in range(args.cycles):
        report = balance(net, max_cycles=1, tol=0.0)
        profiles.append(energy_profile(net).norms)
        print(f"cycle {c + 1}: lp_norm {report.lp_norm_per_cycle[-1]:.6f}")

    with open(os.path.join(args.out, "profiles.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("cycle", "layer", "unit", "norm"))
        for c, prof in enumerate(profiles):
            for label, vec in prof:
                for unit, value in enumerate(vec):
                    w.writerow((c, label, unit, repr(float(value))))
    print(f"wrote {args.out}/profiles.csv")


if __name__ == "__main__":
    main()
