"""Reverse-mode gradients on a tiny 1-D conv net, checked against finite differences."""

import numpy as np

from c3dg import numcore as nc

rng = np.random.default_rng(0)
x = nc.DiffArray(rng.uniform(0, 1, (1, 12)))
K = nc.DiffArray(rng.normal(0, 0.5, (3, 1, 3)), requires_grad=True)
W = nc.DiffArray(rng.normal(0, 0.5, (2, 3 * 12)), requires_grad=True)


def net(K, W):
    h = nc.relu(nc.conv1d(x, K, np.full(3, 0.1)))
    return nc.softmax_cross_entropy(nc.affine(nc.reshape(h, (36,)), W, np.zeros(2)), 1)


with nc.Tape() as tape:
    loss = net(K, W)
tape.backward(loss)
print(f"loss {float(loss.value):.5f}")
print("kernel gradient\n", np.round(K.grad, 4))

rep = nc.grad_check(net, [K.value, W.value])
print(f"finite differences: max relative error {rep.max_rel_error:.2e}, passed={rep.passed}")

# one AdamW step on both tensors
state = nc.AdamState(lr=0.005, weight_decay=1e-4)
nc.adam_step([K, W], [K.grad, W.grad], state)
print(f"after one step: loss {float(net(K, W).value):.5f}")
