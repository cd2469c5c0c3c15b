"""One forward pass of the mechanism, step by step, on a random grid.

Pool the token grid into blocks, score each block against the question,
turn scores into sparse weights, mix the block prompts and prepend the
result to the visual sequence. Run: python3 demos/02_fusion_walkthrough.py
"""

import numpy as np

from grasp import (EntmaxConfig, FlopCounter, PromptBank, TokenGrid, count_params, fuse, fusion_cost,
                   inject, partition_grid, pool_blocks, positional_table)

rng = np.random.default_rng(1)
H = W = 8
d_v, d_t, h, N = 16, 12, 8, 4

grid = TokenGrid(H, W, rng.normal(size=(H * W, d_v)))
part = partition_grid(H, W, N)
print("block 0 holds tokens", sorted(part.index_sets[0].tolist()))

E = pool_blocks(grid, part, positional_table(N, d_v)).value
print("pooled block features", E.shape)

bank = PromptBank.initialize(N, d_v, d_t, h, seed=0, sigma=0.02, proj_gain=3.0)
q = rng.normal(size=d_t)
counter = FlopCounter()
res = fuse(E, q, bank, EntmaxConfig(alpha=1.5), counter=counter)
print("scores ", np.round(res.scores.value, 3))
print("weights", np.round(res.weights.value, 3))

seq = inject(grid, res.p_global)
print(f"sequence grows from {H * W} to {seq.shape[0]} tokens")
print(f"trainable parameters {count_params(bank)} = N*d_p + h*d_v + h*d_t = "
      f"{N * d_v} + {h * d_v} + {h * d_t}")
print(f"fusion cost {counter.total} flops, formula {fusion_cost(N, d_v, d_v, h, d_t)}")
