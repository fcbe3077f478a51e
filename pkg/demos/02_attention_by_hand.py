"""
Scaled dot-product attention, checked by hand
=============================================

The attention block works on a (tokens, width) matrix. Here its behaviour is
compared against plain loops and a few properties that follow from the
softmax weighting.
"""

import numpy as np

from stanet.tensor import Tensor, default_dtype
from stanet.transformer import (AttentionModule, TransformerBlock, attention_weights,
                               scaled_attention, transformer_block)

rng = np.random.default_rng(0)

with default_dtype(np.float64):
    q, k, v = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 2))

    # weights: one softmax per query row
    w = attention_weights(Tensor(q), Tensor(k)).data
    print("row sums:", w.sum(axis=1))

    # the same thing, one score at a time
    manual = np.zeros((4, 2))
    for i in range(4):
        s = np.array([q[i] @ k[j] for j in range(4)]) / np.sqrt(3)
        e = np.exp(s - s.max())
        manual[i] = (e / e.sum()) @ v
    out = scaled_attention(Tensor(q), Tensor(k), Tensor(v)).data
    print("max deviation from the loop:", np.abs(out - manual).max())

    # a zero query attends uniformly, so it returns the mean value row
    zq = scaled_attention(Tensor(np.zeros((1, 3))), Tensor(k), Tensor(v)).data
    print("zero query:", zq.round(4), "mean of V:", v.mean(axis=0).round(4))

    # without a positional embedding, shuffling tokens just shuffles the output
    block = TransformerBlock(3, rng)
    x = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    y = transformer_block(Tensor(x), block).data
    print("equivariance error:", np.abs(transformer_block(Tensor(x[perm]), block).data - y[perm]).max())

# the module form pools a (B, C, T, H, W) map to 8 x 8 before attending
mod = AttentionModule(channels=8, temporal=5, height=32, width=32, rng=rng)
print("tokens for a 5 x 32 x 32 map:", mod.num_tokens)
