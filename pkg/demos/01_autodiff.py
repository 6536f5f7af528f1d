"""Reverse-mode autodiff: a gradient check and a few AdamW steps.

Builds a small softmax cross-entropy on float64 tensors, compares the
backward pass against central differences, then fits it with AdamW.

    python demos/01_autodiff.py
"""
import numpy as np

from fedst import tensor as T
from fedst.tensor import AdamW, Tensor, backward

rng = np.random.default_rng(0)
x = rng.standard_normal((5, 3))
labels = np.array([0, 2, 1, 1, 0])
onehot = np.eye(3)[labels]

W = Tensor(rng.standard_normal((3, 3)) * 0.1, requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)


def loss():
    logits = T.fully_connected(x, W, b)
    return T.neg(T.mean(T.tsum(T.mul(T.log_softmax_lastdim(logits), onehot), axis=-1)))


# analytic gradient
W.grad = b.grad = None
backward(loss())
analytic = W.grad.copy()

# central differences, one coordinate at a time
h = 1e-6
numeric = np.zeros_like(W.data)
for i in np.ndindex(W.shape):
    old = W.data[i]
    W.data[i] = old + h
    up = loss().item()
    W.data[i] = old - h
    down = loss().item()
    W.data[i] = old
    numeric[i] = (up - down) / (2 * h)
rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
print(f"relative gradient error: {rel:.2e}")

# AdamW never zeroes gradients itself
opt = AdamW({"W": W, "b": b}, lr=0.1, weight_decay=1e-3)
for step in range(50):
    opt.zero_grad()
    value = loss()
    backward(value)
    opt.step()
    if step % 10 == 0:
        print(f"step {step:2d}  loss {value.item():.4f}")
print(f"final loss {loss().item():.4f}")
