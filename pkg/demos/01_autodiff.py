"""
A tour of the autodiff core
===========================

Every model in the package is built from the small reverse-mode engine in
`tabpretrain.diffcore`.  This script fits a tiny regression by hand so the
moving parts are visible: tensors, the backward pass, and AdamW.
"""

import numpy as np

from tabpretrain import diffcore as dc

rng = np.random.default_rng(0)

# A noisy quadratic in one variable
x = rng.uniform(-2, 2, size=(256, 1))
y = 0.5 * x**2 - x + 0.1 * rng.normal(size=x.shape)

# Parameters are plain float64 arrays; the graph is rebuilt on every step
params = {
    "w1": rng.normal(size=(1, 32)) * 0.5,
    "b1": np.zeros(32),
    "w2": rng.normal(size=(32, 1)) * 0.2,
    "b2": np.zeros(1),
}
opt = dc.AdamW(params, lr=1e-2, weight_decay=1e-4)


def loss_fn(t):
    h = dc.relu(dc.linear(x, t["w1"], t["b1"]))
    return dc.mse(dc.linear(h, t["w2"], t["b2"]), y)


for step in range(501):
    tensors = {k: dc.parameter(v, k) for k, v in params.items()}
    loss = loss_fn(tensors)
    opt.step(dc.backward(loss, tensors))
    if step % 100 == 0:
        print(f"step {step:4d}  mse {float(loss.data):.4f}")

# The analytic gradient agrees with central differences
tensors = {k: dc.parameter(v, k) for k, v in params.items()}
grads = dc.backward(loss_fn(tensors), tensors)
numeric = dc.numerical_gradient(lambda: float(loss_fn({k: dc.Tensor(v) for k, v in params.items()}).data),
                                params["w2"])
print("max |analytic - numeric| for w2:", np.abs(grads["w2"] - numeric).max())
