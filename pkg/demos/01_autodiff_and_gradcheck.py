"""Backprop through a tiny graph, then check every model against finite differences."""

import numpy as np

from attnmi import autodiff as ad
from attnmi.data import generate_planted_token
from attnmi.models import ATTENTIONS, ENCODERS, Model, ModelConfig
from attnmi.trainer import gradient_check

# y = sum(tanh(x W)); dy/dW = x^T (1 - tanh^2)
rng = np.random.default_rng(0)
W = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
x = ad.Tensor(rng.normal(size=(1, 4)))
y = ad.sum(ad.tanh(ad.matmul(x, W)))
y.backward()
by_hand = x.data.T @ (1 - np.tanh(x.data @ W.data) ** 2)
print("tiny graph max |grad - hand| =", np.abs(W.grad - by_hand).max())

ds = generate_planted_token(200, 6, 20, seed=0)
for enc in ENCODERS:
    for att in ATTENTIONS:
        cfg = ModelConfig(vocab_size=20, encoder_kind=enc, attention_kind=att, embed_dim=4, hidden_dim=6,
                          cnn_kernel_sizes=[1, 3])
        worst = max(gradient_check(Model(cfg, seed=1), ds.train[:2]).values())
        print(f"{enc:6s} {att:8s} worst relative error {worst:.2e}")
