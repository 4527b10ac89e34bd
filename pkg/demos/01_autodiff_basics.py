"""Tape-based reverse-mode autodiff in five minutes.

Builds a tiny two-layer network on random data, checks one analytic gradient
against central finite differences, then lets Adam drive the loss down.
"""

import numpy as np

from textgraph import tensor as T

rng = np.random.default_rng(0)

x = T.Tensor(rng.normal(size=(16, 8)))
y = np.tanh(x.data @ rng.normal(size=(8, 1))).ravel() > 0

w1 = T.Tensor(rng.normal(size=(8, 8)) * 0.3, grad_enabled=True)
b1 = T.Tensor(np.zeros(8), grad_enabled=True)
w2 = T.Tensor(rng.normal(size=(8, 2)) * 0.3, grad_enabled=True)


def forward():
    h = T.relu(x @ w1 + b1)
    return T.softmax_cross_entropy(h @ w2, y.astype(np.int64))


# one forward + backward on a fresh tape
with T.Tape() as tape:
    loss = forward()
T.backward(loss, tape)
print(f"initial loss {loss.item():.4f}, tape recorded {len(tape)} ops")

# finite-difference check of a single weight entry
eps = 1e-5
analytic = w1.grad[3, 4]
w1.data[3, 4] += eps
with T.no_grad():
    up = forward().item()
w1.data[3, 4] -= 2 * eps
with T.no_grad():
    down = forward().item()
w1.data[3, 4] += eps
numeric = (up - down) / (2 * eps)
print(f"dloss/dw1[3,4]: analytic {analytic:.8f}  numeric {numeric:.8f}")
assert abs(analytic - numeric) < 1e-6 * max(1.0, abs(numeric))

# Adam on the same objective
opt = T.Adam({"w1": w1, "b1": b1, "w2": w2}, learning_rate=5e-2)
for step in range(60):
    opt.zero_grad()
    with T.Tape() as tape:
        loss = forward()
    T.backward(loss, tape)
    opt.step()
    if step % 20 == 0:
        print(f"step {step:3d}  loss {loss.item():.4f}")
print(f"final loss {loss.item():.4f}")
