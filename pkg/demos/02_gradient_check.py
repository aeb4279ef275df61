"""Compare analytic and finite-difference gradients of the CNN.

Run with ``python demos/02_gradient_check.py``.
"""

import numpy as np

from cacscore.cnn import Network, gradient_check, he_init, shrunken_network

for seed in range(3):
    rng = np.random.default_rng(seed)
    net = he_init(shrunken_network(), rng)
    x = rng.normal(size=(4, net.input_size, net.input_size))
    y = rng.integers(0, 2, 4)
    print(f"shrunken net, seed {seed}: max relative error {gradient_check(net, x, y, seed=seed):.2e}")

full = he_init(Network.pixel_classifier(), 0)
for name, shape in full.shape_trace():
    print(f"{name:>8} {shape}")
print("parameters:", full.n_params)
rng = np.random.default_rng(1)
err = gradient_check(full, rng.normal(size=(2, 51, 51)), np.array([0, 1]), max_params=200, seed=1)
print(f"full net, 200 sampled parameters: max relative error {err:.2e}")
