"""Writes the synthetic bid log shipped in configs/.

Three keywords; two of them share three healthy advertisers. Each keyword
also carries advertisers that the filters should drop: one with too few
bids, one with constant bids and one that practically never wins.
"""

import argparse
import csv

import numpy as np

HEALTHY = {
    "running_shoes": {"acme": (0.0, 0.40), "birch": (0.1, 0.35), "cobalt": (-0.1, 0.45)},
    "trail_shoes": {"acme": (0.05, 0.35), "birch": (-0.05, 0.40), "cobalt": (0.0, 0.40)},
    "yoga_mats": {"acme": (0.0, 0.30), "dune": (0.1, 0.30)},
}
BIDS_PER_ADVERTISER = 1200


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="configs/bids_synthetic.csv")
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    rows = []
    for kw, advs in HEALTHY.items():
        for adv, (mu, sigma) in advs.items():
            rows += [(kw, adv, b) for b in rng.lognormal(mu, sigma, BIDS_PER_ADVERTISER)]
        rows += [(kw, "sparse", b) for b in rng.lognormal(0.0, 0.4, 400)]
        rows += [(kw, "flat", 1.0) for _ in range(BIDS_PER_ADVERTISER)]
        rows += [(kw, "lowball", b) for b in rng.lognormal(-1.5, 0.6, BIDS_PER_ADVERTISER)]
    order = rng.permutation(len(rows))

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["keyword", "advertiser", "bid"])
        for k, idx in enumerate(order):
            kw, adv, bid = rows[idx]
            w.writerow([kw, adv, f"{bid:.6f}"])
            if k == len(order) // 2:
                w.writerow([kw, adv, "n/a"])


if __name__ == "__main__":
    main()
