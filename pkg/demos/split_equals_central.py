"""The keystone property, shown directly: split training across 3 clients is
the same optimization as monolithic training on the concatenated batches.

Runs 10 rounds twice — once through the split round algebra (client fronts,
server back, cut-gradient scatter, weighted front sync), once through a plain
single-model SGD loop — and prints the worst per-parameter difference.
"""

import numpy as np

from splitfire.nn import build_model, small_vgg_specs
from splitfire.rng import SplitMix64, mix64
from splitfire.split import train_monolithic_rounds, train_split_rounds
from splitfire.tensor import Tensor, concat


def make_rounds(n_rounds, sizes, seed, dtype):
    split_rounds, mono_rounds = [], []
    for r in range(n_rounds):
        per_client, batches, labels = {}, [], []
        for cid, n in enumerate(sizes):
            rng = SplitMix64(mix64(seed, r, cid))
            b = Tensor(rng.uniform(0, 1, n * 64 * 64).reshape(n, 1, 64, 64).astype(dtype))
            l = Tensor((rng.uniform(0, 1, n) >= 0.5).astype(dtype).reshape(n, 1))
            per_client[cid] = (b, l)
            batches.append(b)
            labels.append(l)
        split_rounds.append(per_client)
        mono_rounds.append((concat(batches, 0), concat(labels, 0)))
    return split_rounds, mono_rounds


def main():
    for dtype, label in ((np.float64, "float64"), (np.float32, "float32")):
        split_rounds, mono_rounds = make_rounds(10, (22, 5, 5), seed=1, dtype=dtype)
        split_m, split_losses = train_split_rounds(
            build_model(small_vgg_specs(), seed=2, dtype=dtype), 2, split_rounds, 0.05
        )
        mono_m, mono_losses = train_monolithic_rounds(
            build_model(small_vgg_specs(), seed=2, dtype=dtype), mono_rounds, 0.05
        )
        worst = max(
            float(np.max(np.abs(a.data - b.data)))
            for a, b in zip(split_m.parameters(), mono_m.parameters())
        )
        print(f"{label}: 10 rounds, batch sizes 22/5/5")
        print(f"  split losses  {['%.6f' % l for l in split_losses[:3]]} ...")
        print(f"  mono  losses  {['%.6f' % l for l in mono_losses[:3]]} ...")
        print(f"  worst per-parameter difference: {worst:.3e}")


if __name__ == "__main__":
    main()
