"""Tour of the tensor engine: forward ops, reverse-mode gradients, checking.

Run:  python demos/01_tensor_engine.py
"""

import numpy as np

import gazemap.autodiff as ad

rng = np.random.default_rng(0)

# Every tensor is (batch, channels, height, width), float64.
x = ad.parameter(rng.normal(size=(1, 2, 6, 6)))
kernel = ad.parameter(rng.normal(size=(3, 2, 3, 3)))
bias = ad.parameter(np.zeros((1, 3, 1, 1)))

# A little network: conv -> relu -> max pool -> global mean -> scalar.
h = ad.relu(ad.conv2d(x, kernel, bias, padding="same"))
h = ad.max_pool2d(h, 2, 2)
loss = ad.sum_all(ad.global_avg_pool(h))
print(f"loss value: {loss.item():.6f}")

# Reverse mode fills .grad on everything reachable that wants gradients.
loss.backward()
print(f"d loss / d x      : shape {x.grad.shape}, |g| max {np.abs(x.grad).max():.4f}")
print(f"d loss / d kernel : shape {kernel.grad.shape}, |g| max {np.abs(kernel.grad).max():.4f}")

# The engine ships a central-difference checker. Errors are relative:
# |analytic - numeric| / max(1, |numeric|).
def f(t):
    inner = ad.relu(ad.conv2d(t, kernel, bias, padding="same"))
    return ad.sum_all(ad.max_pool2d(inner, 2, 2))

x2 = ad.parameter(rng.normal(size=(1, 2, 6, 6)))
print(f"grad_check on the composite: {ad.grad_check(f, x2, h=1e-3):.2e}")

# Gradients accumulate across branches that reuse a tensor.
y = ad.parameter(rng.normal(size=(1, 1, 3, 3)))
both = ad.add(ad.sum_all(ad.mul(y, y)), ad.sum_all(y))
both.backward()
print(f"two-branch accumulation matches 2x+1: "
      f"{np.allclose(y.grad, 2 * y.values + 1)}")

# Gaussian kernels follow the size rule 2*round(3 sigma)+1 and sum to one.
k = ad.gaussian_kernel2d(5.0)
print(f"gaussian_kernel2d(5.0): size {k.dims[2]}x{k.dims[3]}, sum {k.values.sum():.12f}")
