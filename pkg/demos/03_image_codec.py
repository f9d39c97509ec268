"""
I-frame codec
=============

One auto-encoder serves several rates: a rate index selects per-channel
scale/shift pairs inside the transforms. The quantized latent is coded
losslessly under a hyper-prior, so the transform is the only lossy step.
"""

import numpy as np

from mfvc.image import compress_iframe, decompress_iframe, init_autoencoder
from mfvc.video import synth_sequence

weights = init_autoencoder(latent_channels=16, downsample_factor=4, lambda_set=(16.0, 64.0, 256.0), seed=0)
frame = synth_sequence("translate", 1, 64, 64, seed=2)[0].astype(np.float32) / 255.0
print("frame", frame.shape, "-> latent", weights.latent_extents(64, 64))

for idx, lam in enumerate(weights.lambda_set):
    chunk, latent = compress_iframe(frame, weights.rate(idx), weights)
    recon, decoded_latent = decompress_iframe(chunk, weights.rate(idx), weights, latent.shape)
    assert np.array_equal(latent, decoded_latent)  # latents travel losslessly
    print(f"rate {idx} (lambda {lam:5.0f}): {chunk.total_bits:6d} bits, "
          f"latent range [{latent.min()}, {latent.max()}], lossless latent roundtrip")

# Weights round-trip through the container format byte-exactly.
import tempfile

from mfvc.image import load_autoencoder

with tempfile.NamedTemporaryFile(suffix=".mfvcw") as fh:
    weights.save(fh.name)
    again = load_autoencoder(fh.name)
    print("weights file roundtrip byte-exact:", again.to_bytes() == weights.to_bytes())
