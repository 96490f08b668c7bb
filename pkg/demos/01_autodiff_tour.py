"""A short tour of the tensor engine: build a graph, backprop, and compare
against a finite difference. Then run the full model once and check one
directional derivative of the two-task loss.

    python3 demos/01_autodiff_tour.py
"""

import numpy as np

from vitdd import ModelConfig, Tensor, ViTDDParams, forward, init_params, multitask_loss, no_grad
from vitdd import tensor as T

rng = np.random.default_rng(0)

# A tiny classifier: logits = x @ W + b, cross-entropy against two labels.
x = Tensor(rng.normal(size=(2, 5)))
W = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)
loss = T.cross_entropy(x @ W + b, np.array([0, 2]))
loss.backward()
print(f"loss {loss.item():.6f}")

# Finite difference on one weight.
h = 1e-5
W0 = W.data.copy()
W.data[1, 2] = W0[1, 2] + h
up = T.cross_entropy(x @ W + b, np.array([0, 2])).item()
W.data[1, 2] = W0[1, 2] - h
down = T.cross_entropy(x @ W + b, np.array([0, 2])).item()
W.data[:] = W0
print(f"dL/dW[1,2]  analytic {W.grad[1, 2]:+.10f}  numeric {(up - down) / (2 * h):+.10f}")

# The desk-sized model: 16x16 driver frames, 8x8 faces, 22 tokens.
cfg = ModelConfig.desk()
params = init_params(cfg, seed=0)
driver = rng.normal(size=(4, 3, 16, 16))
face = rng.normal(size=(4, 3, 8, 8))
yd, ye = rng.integers(0, 10, 4), rng.integers(0, 8, 4)
dist, emo, _ = forward(driver, face, params, cfg)
multitask_loss(dist, emo, yd, ye).backward()
print(f"{len(params)} parameter tensors, {sum(p.data.size for p in params.values())} scalars, T={cfg.seq_len}")

u = {k: rng.normal(size=params[k].shape) for k in params}
analytic = sum(float(np.sum(params[k].grad * u[k])) for k in params)


def loss_along(step):
    shifted = ViTDDParams({k: Tensor(params[k].data + step * u[k]) for k in params})
    with no_grad():
        a, e, _ = forward(driver, face, shifted, cfg)
        return multitask_loss(a, e, yd, ye).item()


numeric = (loss_along(h) - loss_along(-h)) / (2 * h)
print(f"directional derivative  analytic {analytic:+.8f}  numeric {numeric:+.8f}")
