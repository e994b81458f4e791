"""
Tape-based gradients in a few lines
===================================

Every op run inside a ``Tape`` is recorded; ``backward`` walks the tape in
reverse and fills ``.grad`` on the leaves.
"""

import numpy as np

from looseqa import autodiff as ad
from looseqa.autodiff import Tape, Tensor, backward

rng = np.random.default_rng(0)

# a one-hidden-layer net on a toy batch
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor.param(ad.glorot_uniform(rng, 3, 5))
w2 = Tensor.param(ad.glorot_uniform(rng, 5, 2))
y = np.array([0, 1, 1, 0])

with Tape() as tape:
    logits = ad.matmul(ad.tanh(ad.matmul(x, w1)), w2)
    loss = ad.scale(ad.mean(ad.pick(ad.log_softmax(logits), y)), -1.0)
backward(tape, loss)
print("loss", loss.item())
print("dL/dw2\n", w2.grad)

# central differences agree with the tape
eps = 1e-5
i, j = 2, 1
old = w2.data[i, j]
w2.data[i, j] = old + eps
up = ad.scale(ad.mean(ad.pick(ad.log_softmax(ad.matmul(ad.tanh(ad.matmul(x, w1)), w2)), y)), -1.0).item()
w2.data[i, j] = old - eps
down = ad.scale(ad.mean(ad.pick(ad.log_softmax(ad.matmul(ad.tanh(ad.matmul(x, w1)), w2)), y)), -1.0).item()
w2.data[i, j] = old
print("analytic", w2.grad[i, j], "numeric", (up - down) / (2 * eps))

# one clipped SGD step: the global gradient norm is capped at 0.25 first
norm_before = np.sqrt(sum(float((p.grad**2).sum()) for p in (w1, w2)))
ad.sgd_step([w1, w2], lr=0.1, max_grad_norm=0.25)
print("grad norm before clipping", norm_before, "grads zeroed:", not w2.grad.any())

# a tape can be consumed once
try:
    backward(tape, loss)
except RuntimeError as exc:
    print("second backward:", exc)
