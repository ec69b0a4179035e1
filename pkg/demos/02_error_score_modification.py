"""The Gaussian bias that error score modification adds to attention scores.

Each query predicts its own width sigma.  The score for key position j gets
G(j; sigma) added before the causal mask, so a narrow row leans on the first
positions of the refined sequence.
"""

import numpy as np

from gbt.attention import AttentionConfig, MultiHeadAttention, esm_bias, esm_transform
from gbt.tensor import Tensor

raw = np.array([-3.0, -0.3, 0.0, 0.3, 3.0])
sigma = esm_transform(Tensor(raw)).data
for r, s in zip(raw, sigma):
    print(f"raw {r:+.1f} -> sigma {s:.5f}")

g = esm_bias(Tensor(sigma[:, None]), n_keys=6).data
np.set_printoptions(precision=4, suppress=True)
print("bias by key position:\n", g)

# a causal layer with the bias on: future weights stay exactly zero
layer = MultiHeadAttention(AttentionConfig(16, 4, dropout=0.0, causal=True, esm=True),
                           rng=np.random.default_rng(0)).eval()
layer(Tensor(np.random.default_rng(1).normal(size=(1, 6, 16))))
w = layer.last_weights.data[0, 0]
print("head 0 weights:\n", w)
print("upper triangle all zero:", bool(np.all(np.triu(w, 1) == 0.0)))
