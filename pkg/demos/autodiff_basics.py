"""
Reverse-mode differentiation on plain numpy arrays
===================================================

A tiny tour of the tensor engine: build a small graph, call ``backward``
and compare against central differences.
"""

import numpy as np

from pclkd.tensor import Tensor, conv2d, log_softmax, matmul, pick

rng = np.random.default_rng(0)

# A linear layer followed by a log-softmax and a label pick is all a
# cross-entropy needs.
x = Tensor(rng.normal(size=(4, 3)))
w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
labels = np.array([0, 2, 4, 1])

loss = -pick(log_softmax(matmul(x, w), axis=1), labels).mean()
loss.backward()
print("loss", loss.item())
print("dL/dw\n", w.grad.round(4))


# Central differences agree to many digits.
def f():
    return (-pick(log_softmax(matmul(x, w), axis=1), labels).mean()).item()


eps = 1e-6
num = np.zeros_like(w.data)
for i in np.ndindex(w.data.shape):
    old = w.data[i]
    w.data[i] = old + eps
    up = f()
    w.data[i] = old - eps
    down = f()
    w.data[i] = old
    num[i] = (up - down) / (2 * eps)
print("max |autodiff - numeric|", np.abs(w.grad - num).max())

# Convolutions go through im2col, so the same check works for images.
img = Tensor(rng.normal(size=(2, 3, 6, 6)))
k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
out = conv2d(img, k, stride=2, padding=1)
print("conv output shape", out.shape)
out.sum().backward()
print("kernel gradient shape", k.grad.shape)

# Fan-out accumulates: using a tensor twice doubles its gradient.
a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
(a * a + a * a).sum().backward()
print("d/da 2a^2 =", a.grad, "expected", 4 * a.data)
