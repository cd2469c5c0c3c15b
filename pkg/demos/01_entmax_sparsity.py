"""How the sparsity exponent shapes the fusion weights.

alpha = 1 is softmax (every block keeps some weight), alpha = 2 is
sparsemax, and values in between interpolate. Run: python3 demos/01_entmax_sparsity.py
"""

import numpy as np

from grasp import EntmaxConfig, entmax_forward

scores = np.array([1.2, 0.9, 0.1, -0.4])
print("scores", scores)
for alpha in (1.0, 1.2, 1.5, 1.8, 2.0):
    out = entmax_forward(scores, EntmaxConfig(alpha=alpha))
    print(f"alpha {alpha:.1f}  weights {np.round(out.probs, 4)}  support {int(out.support.sum())}")

# on random score vectors, how often does each alpha zero out a block?
rng = np.random.default_rng(0)
S = rng.normal(size=(1000, 16))
for alpha in (1.0, 1.5, 2.0):
    P = np.stack([entmax_forward(s, EntmaxConfig(alpha=alpha)).probs for s in S])
    print(f"alpha {alpha:.1f}: mean support {np.mean(np.sum(P > 0, axis=1)):.2f} of 16")
