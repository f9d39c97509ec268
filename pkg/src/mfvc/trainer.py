"""Two-stage training: the rate-conditioned auto-encoder learns on single
frames, then the spatiotemporal entropy model learns on frame pairs with
the auto-encoder frozen.

Both stages use Adam with a piecewise-constant learning-rate schedule and
the additive-uniform-noise quantization surrogate. Data sampling may run
concurrently with optimization, but parameter updates are serialized per
step.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import image as image_mod
from .coder import LOG_SCALE_MAX, LOG_SCALE_MIN
from .image import AutoencoderWeights, RateIndex, analyze, synthesis_transform
from .stem import StemFlags, StemWeights, init_stem, p_frame_rate
from .tensor import (
    ConfigError,
    ConvLayer,
    Tensor,
    add_uniform_noise,
    affine,
    avg_pool2,
    backward,
    clamp,
    conv2d,
    div,
    expand_param,
    laplace_nll_bits,
    mean_all,
    mul,
    powp,
    round_half_away,
    sub,
    sum_all,
)

# Full-scale schedule; desk-scale runs shrink the boundaries proportionally.
FULL_SCALE_LR_VALUES = (1e-4, 5e-5, 1e-5, 5e-6, 1e-6)
FULL_SCALE_LR_BOUNDARIES = (1_600_000, 2_100_000, 2_300_000, 2_400_000, 2_500_000)

MSSSIM_WEIGHTS_5 = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class TrainConfig:
    lambda_set: tuple[float, ...] = image_mod.DEFAULT_LAMBDA_SET
    batch_size: int = 4
    patch_h: int = 64
    patch_w: int = 64
    lr_values: tuple[float, ...] = (1e-3, 5e-4, 1e-4)
    lr_boundaries: tuple[int, ...] = (2000, 4000)
    total_iters: int = 5000
    distortion: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.distortion not in ("mse", "ms-ssim"):
            raise ConfigError(f"distortion must be 'mse' or 'ms-ssim', got '{self.distortion}'")
        if len(self.lr_boundaries) not in (len(self.lr_values), len(self.lr_values) - 1):
            raise ConfigError("lr_boundaries must have the same length as lr_values, or one fewer")
        if any(b >= a for a, b in zip(self.lr_boundaries[1:], self.lr_boundaries)):
            raise ConfigError("lr_boundaries must be strictly increasing")
        if not self.lambda_set or any(v <= 0 for v in self.lambda_set):
            raise ConfigError("lambda_set must contain positive values")


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Learning rate in effect at an iteration: the i-th value where i
    counts boundaries <= iteration, capped at the last value."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    i = sum(1 for b in cfg.lr_boundaries if b <= iteration)
    return float(cfg.lr_values[min(i, len(cfg.lr_values) - 1)])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def init_optimizer(params: Sequence[Tensor]) -> OptimizerState:
    return OptimizerState(
        m=[np.zeros(p.shape, dtype=np.float32) for p in params],
        v=[np.zeros(p.shape, dtype=np.float32) for p in params],
    )


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: OptimizerState, lr: float) -> int:
    """Bias-corrected Adam update in place; returns how many tensors were
    skipped this step because their gradient was absent or non-finite."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    skipped = 0
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.isfinite(g).all():
            skipped += 1
            continue
        g = g.astype(np.float32, copy=False)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    state.skipped += skipped
    return skipped


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Differentiable distortion terms
# ---------------------------------------------------------------------------


def mse_distortion(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return mean_all(mul(d, d))


def _gaussian_window(channels: int, dtype=np.float32) -> ConvLayer:
    x = np.arange(11, dtype=np.float64) - 5.0
    g = np.exp(-(x**2) / (2.0 * 1.5**2))
    g /= g.sum()
    win2d = np.outer(g, g)
    kernel = np.zeros((channels, channels, 11, 11), dtype=dtype)
    for c in range(channels):
        kernel[c, c] = win2d
    return ConvLayer(
        kernel=Tensor(kernel, dtype=dtype),
        bias=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), dtype=dtype),
        stride=1,
    )


def msssim_index(a: Tensor, b: Tensor, scales: int = 3) -> Tensor:
    """Differentiable multiscale structural similarity for [0, 1] frames.

    Contrast/structure terms at every scale, luminance at the coarsest
    only; with fewer than five scales the leading standard weights are
    renormalized. Border handling uses the network's zero padding, which
    is fine for a training objective (the evaluation metric lives in
    :mod:`mfvc.metrics`).
    """
    if a.shape != b.shape:
        raise ConfigError(f"frames differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape[2], a.shape[3]) < 2 ** (scales - 1) * 11:
        raise ConfigError(f"frames too small for {scales} scales; need at least {2 ** (scales - 1) * 11} pixels")
    weights = np.asarray(MSSSIM_WEIGHTS_5[:scales])
    weights = weights / weights.sum()
    c1 = 0.01**2
    c2 = 0.03**2
    blur = _gaussian_window(a.shape[1])

    total: Optional[Tensor] = None
    for s in range(scales):
        mu_a = conv2d(a, blur)
        mu_b = conv2d(b, blur)
        mu_aa = mul(mu_a, mu_a)
        mu_bb = mul(mu_b, mu_b)
        mu_ab = mul(mu_a, mu_b)
        var_a = sub(conv2d(mul(a, a), blur), mu_aa)
        var_b = sub(conv2d(mul(b, b), blur), mu_bb)
        cov = sub(conv2d(mul(a, b), blur), mu_ab)
        cs_map = div(affine(cov, 2.0, c2), affine(var_a + var_b, 1.0, c2))
        if s == scales - 1:
            lum = div(affine(mu_ab, 2.0, c1), affine(mu_aa + mu_bb, 1.0, c1))
            term = mean_all(mul(lum, cs_map))
        else:
            term = mean_all(cs_map)
        term = powp(clamp(term, 1e-4, 1.0), float(weights[s]))
        total = term if total is None else mul(total, term)
        if s != scales - 1:
            a = avg_pool2(a)
            b = avg_pool2(b)
    return total


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _noisy(x: Tensor, seed: int) -> Tensor:
    return add_uniform_noise(x, seed)


def loss_i(frames: np.ndarray, rate: RateIndex, weights: AutoencoderWeights,
           distortion: str = "mse", noise_seed: int = 0, msssim_scales: int = 3):
    """Single-frame training objective: rate plus lambda-weighted distortion.

    Returns (loss, rate_bpp, distortion) as scalar graph tensors. Rate is
    the noisy-latent cross entropy (latent plus hyper) in bits per pixel;
    distortion is MSE on [0, 1] pixels or one minus the multiscale
    similarity index.
    """
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    dtype = weights.analysis[0].kernel.dtype
    x = Tensor(frames.astype(dtype))
    b, _, h, w = x.shape

    y = analyze(x, rate, weights)
    y_tilde = _noisy(y, noise_seed)
    z = image_mod._run_chain(y_tilde, weights.hyper_enc)
    z_tilde = _noisy(z, noise_seed + 1)
    mu, log_scale = image_mod.hyper_synthesis(z_tilde, weights, y.shape[2], y.shape[3])
    y_bits = sum_all(laplace_nll_bits(y_tilde, mu, log_scale))
    prior_mu, prior_ls = weights.z_prior
    z_bits = sum_all(
        laplace_nll_bits(
            z_tilde,
            expand_param(prior_mu, z_tilde),
            clamp(expand_param(prior_ls, z_tilde), LOG_SCALE_MIN, LOG_SCALE_MAX),
        )
    )
    rate_bpp = affine(y_bits + z_bits, 1.0 / (b * h * w), 0.0)

    recon = synthesis_transform(y_tilde, rate, weights)
    if distortion == "mse":
        dist = mse_distortion(x, recon)
    else:
        dist = affine(msssim_index(x, recon, msssim_scales), -1.0, 1.0)
    loss = rate_bpp + affine(dist, rate.lambda_value, 0.0)
    return loss, rate_bpp, dist


def loss_p(latent: np.ndarray, prev_latent: np.ndarray, flags: StemFlags,
           weights: StemWeights, training: bool = True, noise_seed: int = 0) -> Tensor:
    """P-frame objective: total (latent + hyper) bits per latent symbol.

    There is no distortion term; reconstruction quality is fixed by the
    frozen auto-encoder.
    """
    y_bits, z_bits = p_frame_rate(latent, prev_latent, flags, weights,
                                  training=training, noise_seed=noise_seed)
    count = int(np.prod(np.asarray(latent).shape))
    return affine(y_bits + z_bits, 1.0 / count, 0.0)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


class _TrainLog:
    def __init__(self, path):
        self.path = path
        if path is not None and not os.path.exists(path):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(["iteration", "lr", "loss", "R", "D"])

    def row(self, iteration: int, lr: float, loss: float, rate: float, dist: float):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([iteration, f"{lr:.8g}", f"{loss:.8g}", f"{rate:.8g}", f"{dist:.8g}"])


def _as_frame_array(dataset) -> np.ndarray:
    frames = np.asarray(dataset)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ConfigError(f"dataset must be (N, 3, H, W) frames, got shape {frames.shape}")
    if frames.size == 0:
        raise ConfigError("dataset is empty")
    if frames.dtype == np.uint8:
        frames = frames.astype(np.float32) / 255.0
    return frames.astype(np.float32)


def _random_crop(rng, frame_hw, patch_h, patch_w):
    h, w = frame_hw
    if h < patch_h or w < patch_w:
        raise ConfigError(f"frames of {h}x{w} are smaller than the {patch_h}x{patch_w} patch")
    r = int(rng.integers(0, h - patch_h + 1))
    c = int(rng.integers(0, w - patch_w + 1))
    return r, c


def train_image_model(dataset, cfg: TrainConfig, weights: Optional[AutoencoderWeights] = None,
                      log_path=None, checkpoint_path=None, checkpoint_every: int = 0) -> AutoencoderWeights:
    """Optimize the auto-encoder on random crops with a random rate index
    per sample; returns the trained weights (also checkpointed if asked)."""
    frames = _as_frame_array(dataset)
    if weights is None:
        weights = image_mod.init_autoencoder(lambda_set=cfg.lambda_set, seed=cfg.seed)
    if tuple(weights.lambda_set) != tuple(cfg.lambda_set):
        raise ConfigError("weights lambda_set does not match the training config")
    f = weights.downsample_factor
    if cfg.patch_h % f or cfg.patch_w % f:
        raise ConfigError(f"patch extents must be divisible by the downsampling factor {f}")

    weights.set_trainable(True)
    params = weights.parameters()
    state = init_optimizer(params)
    rng = np.random.default_rng(cfg.seed)
    log = _TrainLog(log_path)

    for it in range(cfg.total_iters):
        lr = lr_at(it, cfg)
        zero_grads(params)
        idx = rng.integers(0, len(frames), size=cfg.batch_size)
        lams = rng.integers(0, len(cfg.lambda_set), size=cfg.batch_size)
        crops = []
        for k in range(cfg.batch_size):
            r, c = _random_crop(rng, frames.shape[2:], cfg.patch_h, cfg.patch_w)
            crops.append(frames[idx[k], :, r : r + cfg.patch_h, c : c + cfg.patch_w])

        loss_val = rate_val = dist_val = 0.0
        for lam_idx in sorted(set(int(v) for v in lams)):
            members = [k for k in range(cfg.batch_size) if lams[k] == lam_idx]
            batch = np.stack([crops[k] for k in members])
            share = len(members) / cfg.batch_size
            loss, rate, dist = loss_i(
                batch, weights.rate(lam_idx), weights,
                distortion=cfg.distortion, noise_seed=(cfg.seed << 20) ^ (it * 7 + lam_idx),
            )
            backward(affine(loss, share, 0.0))
            loss_val += share * loss.item()
            rate_val += share * rate.item()
            dist_val += share * dist.item()

        adam_step(params, [p.grad for p in params], state, lr)
        log.row(it, lr, loss_val, rate_val, dist_val)
        if checkpoint_path and checkpoint_every and (it + 1) % checkpoint_every == 0:
            weights.save(checkpoint_path)

    weights.set_trainable(False)
    if checkpoint_path:
        weights.save(checkpoint_path)
    return weights


def _normalize_clips(dataset_pairs) -> list[np.ndarray]:
    clips = []
    for clip in dataset_pairs:
        arr = np.asarray(clip)
        if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[0] < 2:
            raise ConfigError("each clip must be (n >= 2, 3, H, W)")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        clips.append(arr.astype(np.float32))
    if not clips:
        raise ConfigError("dataset is empty")
    return clips


def _frozen_latents(frames: np.ndarray, rate: RateIndex, weights: AutoencoderWeights) -> np.ndarray:
    latent = analyze(Tensor(frames.astype(np.float32)), rate, weights)
    return round_half_away(latent.data)


def train_stem(dataset_pairs, frozen_weights: AutoencoderWeights, cfg: TrainConfig,
               flags: StemFlags = StemFlags(), stem_weights: Optional[StemWeights] = None,
               log_path=None, checkpoint_path=None, checkpoint_every: int = 0) -> StemWeights:
    """Optimize the spatiotemporal entropy model on frame pairs.

    Each pair is (first frame of a clip, a random later frame), cropped at
    the same location; latents come from the frozen auto-encoder at one
    random rate index per batch, so a single model serves every rate.
    """
    clips = _normalize_clips(dataset_pairs)
    frozen_weights.set_trainable(False)
    if stem_weights is None:
        stem_weights = init_stem(latent_channels=frozen_weights.latent_channels, seed=cfg.seed)
    f = frozen_weights.downsample_factor
    if cfg.patch_h % f or cfg.patch_w % f:
        raise ConfigError(f"patch extents must be divisible by the downsampling factor {f}")

    stem_weights.set_trainable(True)
    params = stem_weights.parameters()
    state = init_optimizer(params)
    rng = np.random.default_rng(cfg.seed)
    log = _TrainLog(log_path)

    for it in range(cfg.total_iters):
        lr = lr_at(it, cfg)
        zero_grads(params)
        lam_idx = int(rng.integers(0, len(cfg.lambda_set)))
        refs, curs = [], []
        for _ in range(cfg.batch_size):
            clip = clips[int(rng.integers(0, len(clips)))]
            cur = int(rng.integers(1, clip.shape[0]))
            r, c = _random_crop(rng, clip.shape[2:], cfg.patch_h, cfg.patch_w)
            refs.append(clip[0, :, r : r + cfg.patch_h, c : c + cfg.patch_w])
            curs.append(clip[cur, :, r : r + cfg.patch_h, c : c + cfg.patch_w])

        rate = frozen_weights.rate(lam_idx)
        prev_latents = _frozen_latents(np.stack(refs), rate, frozen_weights)
        latents = _frozen_latents(np.stack(curs), rate, frozen_weights)

        loss = loss_p(latents, prev_latents, flags, stem_weights,
                      training=True, noise_seed=(cfg.seed << 20) ^ (it * 11))
        backward(loss)
        adam_step(params, [p.grad for p in params], state, lr)
        log.row(it, lr, loss.item(), loss.item(), 0.0)
        if checkpoint_path and checkpoint_every and (it + 1) % checkpoint_every == 0:
            stem_weights.save(checkpoint_path)

    stem_weights.set_trainable(False)
    if checkpoint_path:
        stem_weights.save(checkpoint_path)
    return stem_weights
