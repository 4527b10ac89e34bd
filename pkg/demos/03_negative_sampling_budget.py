"""Joint vs independent negative sampling: same statistical job, very
different encoder bill.

Each positive triplet gets k corrupted copies.  Independent corruption draws
a fresh entity per negative, so a batch of n positives can touch n + n*k
distinct endpoints -- every one of them a text-encoder forward.  Joint
sampling shares one n-entity pool across all negatives, capping the batch at
3n distinct endpoints no matter how large k grows.
"""

import numpy as np

from textgraph.graph import TRAIN, SyntheticSpec, generate_synthetic
from textgraph.negatives import corrupt_independent, corrupt_joint

graph = generate_synthetic(SyntheticSpec(
    nodes_per_type=2000, clusters=4, intra_p=0.01, inter_p=0.001,
    vocab_size=100, tokens_per_node=5, seed=2))

rels, srcs, dsts = graph.link_edges(TRAIN)
rng = np.random.default_rng(7)
n = 128

print(f"batch n={n} positives, graph has {graph.total_nodes} nodes")
print(f"{'k':>4} {'independent':>12} {'joint':>8} {'3n cap':>8}")
for k in (2, 8, 16, 32):
    pick = rng.choice(rels.size, size=n, replace=False)
    br, bh, bt = rels[pick], srcs[pick], dsts[pick]
    ind = corrupt_independent(graph, br, bh, bt, k, rng=rng)
    jnt = corrupt_joint(graph, br, bh, bt, k, rng=rng)
    print(f"{k:>4} {ind.distinct_endpoints:>12} {jnt.distinct_endpoints:>8} {3 * n:>8}")
    assert jnt.distinct_endpoints <= 3 * n
