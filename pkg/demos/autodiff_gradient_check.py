"""
Tape-based gradients and a finite-difference check
==================================================

Every kernel records itself on a thread-local tape.  ``backward`` walks the
tape in reverse and leaves gradients in ``.grad`` on the leaf tensors.
"""

import numpy as np

from reschest import tensor as T
from reschest.optim import cross_entropy

rng = np.random.default_rng(0)

# a tiny conv -> batchnorm -> relu -> pool -> linear stack
x = T.Tensor(rng.uniform(-1, 1, (2, 1, 8, 8)))
w = T.Tensor(rng.normal(0, 0.5, (3, 1, 3, 3)), requires_grad=True)
gamma, beta = T.ones((3,), requires_grad=True), T.zeros((3,), requires_grad=True)
rm, rv = T.zeros((3,)), T.ones((3,))
fc = T.Tensor(rng.normal(0, 0.5, (5, 3)), requires_grad=True)
labels = np.array([1, 4])


def loss_fn():
    h = T.conv2d(x, w, None, stride=1, padding=1)
    h = T.relu(T.batchnorm2d(h, gamma, beta, rm, rv, training=True))
    h = T.global_avg_pool(T.maxpool2d(h, 2, 2))
    return cross_entropy(T.linear(h, fc), labels)


loss = loss_fn()
print("recorded ops:", [node.op for node in T.get_tape().nodes])
T.backward(loss)
print("loss", loss.item())

# compare one filter tap against a central difference
saved_rm, saved_rv = rm.data.copy(), rv.data.copy()


def value():
    with T.no_grad():
        v = loss_fn().item()
    rm.data[...], rv.data[...] = saved_rm, saved_rv
    return v


h = 1e-2
for idx in [(0, 0, 1, 1), (2, 0, 0, 2)]:
    orig = w.data[idx]
    w.data[idx] = orig + h
    up = value()
    w.data[idx] = orig - h
    down = value()
    w.data[idx] = orig
    print(idx, "tape", float(w.grad[idx]), "central difference", (up - down) / (2 * h))
