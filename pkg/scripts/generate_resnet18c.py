"""Generate the 18-layer residual network with learned 1x1 shortcuts and
save it as a container, so the element-count bookkeeping and balancing can
be exercised without any dataset."""

import argparse

from enorm import count_normalized_elements, resnet18_type_c, save_network


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="resnet18c.nwc")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--input-hw", type=int, default=224)
    ap.add_argument("--classes", type=int, default=1000)
    args = ap.parse_args()

    net = resnet18_type_c(
        seed=args.seed, input_hw=args.input_hw, num_classes=args.classes
    )
    save_network(net, args.out)
    print(f"wrote {args.out}")
    print(f"normalized elements: {count_normalized_elements(net):,}")


if __name__ == "__main__":
    main()
