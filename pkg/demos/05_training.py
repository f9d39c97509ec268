"""
Two-stage training
==================

Stage one fits the rate-conditioned auto-encoder on single frames (rate
plus lambda-weighted distortion). Stage two freezes it and fits the
spatiotemporal entropy model on frame pairs (pure rate, no distortion
term, random rate index per batch so one model covers all rates).

This demo shrinks the iteration counts to finish in about a minute; the
full desk-scale recipe (used by tests/test_acceptance.py) runs 3200 and
5000 iterations.
"""

import numpy as np

from mfvc.container import FRAME_I
from mfvc.image import init_autoencoder
from mfvc.stem import StemFlags
from mfvc.trainer import TrainConfig, train_image_model, train_stem
from mfvc.video import GopConfig, compress_video, decompress_video, synth_clips, synth_sequence
from mfvc import metrics

LAMBDAS = (16.0, 64.0, 256.0)

parts = []
for s in range(4):
    parts.append(synth_sequence("translate", 4, 48, 48, seed=100 + s, shift=2))
    parts.append(synth_sequence("zoom", 4, 48, 48, seed=200 + s))
dataset = np.concatenate(parts)

ae = init_autoencoder(latent_channels=16, downsample_factor=4, lambda_set=LAMBDAS, seed=1)
cfg = TrainConfig(lambda_set=LAMBDAS, batch_size=4, patch_h=32, patch_w=32,
                  lr_values=(1e-3, 5e-4), lr_boundaries=(500,), total_iters=800, seed=1)
train_image_model(dataset, cfg, weights=ae)
print("auto-encoder trained (800 iterations)")

# Static clips matter: they teach the model that an all-zero residual
# should cost almost nothing.
clips = synth_clips("translate", 6, 7, 48, 48, seed=300, shift=2)
clips += synth_clips("translate", 2, 7, 48, 48, seed=500, shift=0)
scfg = TrainConfig(lambda_set=LAMBDAS, batch_size=4, patch_h=32, patch_w=32,
                   lr_values=(1e-3, 5e-4), lr_boundaries=(500,), total_iters=800, seed=2)
stem = train_stem(clips, ae, scfg, flags=StemFlags())
print("entropy model trained (800 iterations)")

# Rate-distortion across the lambda set, plus I-frame vs P-frame cost.
test = synth_sequence("translate", 13, 48, 48, seed=555, shift=2)
pixels = test.shape[0] * 48 * 48
print(f"{'rate':>4} {'bpp':>8} {'PSNR':>7} {'P/I bits':>9}")
for idx in range(len(LAMBDAS)):
    stream = compress_video(test, ae, stem, GopConfig(gop_size=12, rate=ae.rate(idx)))
    decoded = decompress_video(stream, ae, stem)
    i_bits = [c.total_bits for c in stream.chunks if c.frame_type == FRAME_I]
    p_bits = [c.total_bits for c in stream.chunks if c.frame_type != FRAME_I]
    print(f"{idx:>4} {8 * len(stream.to_bytes()) / pixels:>8.4f} "
          f"{metrics.psnr(test, decoded):>7.2f} {np.mean(p_bits) / np.mean(i_bits):>9.3f}")
