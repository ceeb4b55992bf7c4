"""Train the same student twice on a synthetic teacher-student regression,
with and without interleaved rebalancing, and write both metric streams for
comparison (loss curves and global weight energy)."""

import argparse
import csv
import os

import numpy as np

from enorm import TrainConfig, fc_network, synth_dataset, train_loop


def run(tag, cycles, args, out_dir):
    net = fc_network([args.dims] + args.hidden + [1], seed=args.init_seed)
    config = TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        enorm_cycles_per_step=cycles,
        seed=args.seed,
    )
    data = synth_dataset("regression", args.samples, args.dims, seed=args.data_seed)
    metrics, epochs = train_loop(net, data, config)
    path = os.path.join(out_dir, f"metrics_{tag}.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "epoch", "lr", "train_loss", "global_l2_norm", "wall_ms"))
        for m in metrics:
            w.writerow((m.step, m.epoch, repr(m.lr), repr(m.train_loss),
                        repr(m.global_l2_norm), repr(m.wall_ms)))
    print(f"{tag}: final epoch loss {epochs[-1].mean_loss:.6f}, "
          f"final energy {metrics[-1].global_l2_norm:.3f} -> {path}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--hidden", type=int, nargs="+", default=[64, 64, 32])
    ap.add_argument("--lr", type=float, default=0.005)
    ap.add_argument("--momentum", type=float, default=0.9)
    ap.add_argument("--weight-decay", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--data-seed", type=int, default=5)
    ap.add_argument("--init-seed", type=int, default=2)
    ap.add_argument("--out", default="train_compare_out")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    run("baseline", 0, args, args.out)
    run("rebalanced", 1, args, args.out)


if __name__ == "__main__":
    main()
