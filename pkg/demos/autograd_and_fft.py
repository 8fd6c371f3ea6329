"""
Gradients and spectra
=====================

The tape-based autograd, checked against central differences, and the
hand-written FFT on a size that is not a power of two.
"""

import numpy as np

from ddsr.spectral import amplitude_map, dft2, fft2, ifft2
from ddsr.tensor import Tensor, grad_check, ops

rng = np.random.default_rng(0)

# a tiny conv -> GELU -> mean, checked in float64
x = Tensor(rng.standard_normal((1, 2, 6, 6)))
w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3)
err = grad_check(lambda a, b: ops.gelu(ops.conv2d(a, b, padding=1)), [x, w])
print(f"conv + gelu relative gradient error: {err:.2e}")

# 30 x 21 goes through the mixed-radix path (30 = 2*3*5) and Bluestein (21 via 7)
img = rng.random((30, 21))
z = dft2(img)
print("max |ours - numpy|:", np.abs(z - np.fft.fft2(img, norm="ortho")).max())
print("energy ratio (Parseval):", np.sum(np.abs(z) ** 2) / np.sum(img ** 2))

# the differentiable pair used inside the network
spec = fft2(Tensor(img[None, None]))
back = ifft2(spec)
print("round trip error:", np.abs(back.data[0, 0] - img).max())

# a vertical grating puts its energy on one horizontal line of the centered map
stripes = np.sin(np.arange(32) * 2 * np.pi * 6 / 32)[None, :] * np.ones((32, 1))
amp = amplitude_map(fft2(Tensor(stripes[None, None])), log_scale=False).data[0, 0]
print("bright bins of a 6-cycle grating:", [(int(r), int(c)) for r, c in zip(*np.nonzero(amp > 1.0))])
