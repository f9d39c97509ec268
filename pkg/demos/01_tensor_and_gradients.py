"""
Tensor engine basics
====================

The codec's networks run on a small dense tensor engine: 4-D arrays
(batch, channel, height, width), strided convolutions with zero "same"
padding, and reverse-mode gradients recorded on the fly.
"""

import numpy as np

from mfvc.tensor import (
    ConvLayer,
    Tensor,
    backward,
    causal_mask,
    conv2d,
    finite_diff_check,
    leaky_relu,
    masked_conv2d,
    mul,
    quantize_round,
    sum_all,
)

rng = np.random.default_rng(0)

# A 3x3 all-ones kernel over an all-ones image: the fully-overlapped
# center position sums nine ones.
x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
layer = ConvLayer(
    kernel=Tensor(np.ones((1, 1, 3, 3), dtype=np.float32)),
    bias=Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32)),
)
print("center of conv(ones, ones):", conv2d(x, layer).data[0, 0, 1, 1])

# The causal mask lets a convolution see only raster-earlier positions.
# For a 5x5 kernel that is the 12 positions before the center.
mask = causal_mask(5, 5)
print("causal 5x5 mask passes", int(mask.sum()), "positions:")
print(mask.astype(int))

# Perturbing one input position never changes outputs at or before it.
spm = ConvLayer(
    kernel=Tensor(rng.normal(size=(1, 1, 5, 5)).astype(np.float32)),
    bias=Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32)),
    mask=mask,
)
base = rng.normal(size=(1, 1, 8, 8)).astype(np.float32)
y0 = masked_conv2d(Tensor(base), spm).data.reshape(-1)
bumped = base.copy()
bumped[0, 0, 3, 3] += 10.0  # raster position 27
y1 = masked_conv2d(Tensor(bumped), spm).data.reshape(-1)
print("outputs changed before position 27:", int(np.sum(y0[:28] != y1[:28])))
print("outputs changed after position 27: ", int(np.sum(y0[28:] != y1[28:])))

# Gradients: d(sum(x))/dx is all ones, and every primitive agrees with
# central finite differences.
t = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32), requires_grad=True)
backward(sum_all(t))
print("gradient of sum is all ones:", bool((t.grad == 1).all()))

err = finite_diff_check(lambda a: sum_all(mul(y := leaky_relu(conv2d(a, layer), 0.2), y)),
                        Tensor(rng.normal(size=(1, 1, 3, 3)) + 0.05), h=1e-4)
print(f"conv + leaky_relu finite-difference error: {err:.2e}")

# Quantization rounds half away from zero, the symmetric choice for
# signed residual latents.
vals = Tensor(np.array([[-1.5, -0.5, 0.49, 0.5, 1.5]], dtype=np.float32).reshape(1, 1, 1, 5))
print("round([-1.5, -0.5, 0.49, 0.5, 1.5]) =", quantize_round(vals).reshape(-1))
