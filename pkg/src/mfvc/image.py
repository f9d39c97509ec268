"""Unified frame auto-encoder: rate-conditioned analysis/synthesis transforms
with a hyper-prior entropy model for standalone (I-frame) compression.

One model serves every rate in its lambda set through per-channel
conditional scale/shift pairs selected by a rate index; the latent itself
is transmitted losslessly, so reconstruction quality depends only on the
frame and the chosen rate. Weights are read-only during inference and may
be shared across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coder, serialize
from .container import FRAME_I, FrameChunk
from .tensor import (
    ConfigError,
    ConvLayer,
    ShapeError,
    Tensor,
    _make_node,
    clamp,
    conv2d,
    crop_hw,
    expand_param,
    laplace_nll_bits,
    leaky_relu,
    mul,
    quantize_round,
    softplus,
    sum_all,
    transpose_conv2d,
)

LEAKY_SLOPE = 0.2

# Channel widths scale linearly from the full-size model (320 latent
# channels, hyper width 256); desk-scale models keep the same ratios.
REFERENCE_LATENT_CHANNELS = 320
REFERENCE_HYPER_WIDTH = 256

DEFAULT_LAMBDA_SET = (16.0, 64.0, 256.0, 1024.0)

# Full-scale training rate sets (MSE-optimized and MS-SSIM-optimized).
FULL_SCALE_LAMBDA_SET_MSE = (50.0, 105.0, 160.0, 300.0, 480.0, 710.0, 1000.0, 1780.0, 2915.0)
FULL_SCALE_LAMBDA_SET_MSSSIM = (3.0, 5.0, 8.0, 14.0, 20.0, 35.0, 52.0, 98.0, 145.0)


def scaled_width(reference_width: int, latent_channels: int) -> int:
    """Proportional channel count for a desk-scale model."""
    return max(2, round(reference_width * latent_channels / REFERENCE_LATENT_CHANNELS))


@dataclass(frozen=True)
class RateIndex:
    """Position in the configured lambda set plus the multiplier itself."""

    index: int
    lambda_value: float


@dataclass
class AutoencoderWeights:
    analysis: list[ConvLayer]
    synthesis: list[ConvLayer]
    lambda_table: dict[str, list[tuple[Tensor, Tensor]]]
    hyper_enc: list[ConvLayer]
    hyper_dec: list[ConvLayer]
    z_prior: tuple[Tensor, Tensor]
    lambda_set: tuple[float, ...]
    latent_channels: int
    downsample_factor: int
    hyper_channels: int

    def rate(self, index: int) -> RateIndex:
        if not 0 <= index < len(self.lambda_set):
            raise ConfigError(f"rate index {index} outside lambda set of size {len(self.lambda_set)}")
        return RateIndex(index, self.lambda_set[index])

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.analysis + self.synthesis + self.hyper_enc + self.hyper_dec:
            params.extend(layer.parameters())
        for layer_id in sorted(self.lambda_table):
            for scale, bias in self.lambda_table[layer_id]:
                params.extend([scale, bias])
        params.extend(self.z_prior)
        return params

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def latent_extents(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.downsample_factor
        if height % f or width % f:
            raise ShapeError(
                f"frame extents {height}x{width} are not divisible by the downsampling factor {f}; "
                "pad the frame first (the video pipeline pads by edge replication)"
            )
        return self.latent_channels, height // f, width // f

    def hyper_extents(self, latent_h: int, latent_w: int) -> tuple[int, int, int]:
        h, w = latent_h, latent_w
        for layer in self.hyper_enc:
            h = -(-h // layer.stride)
            w = -(-w // layer.stride)
        return self.hyper_channels, h, w

    def to_named(self) -> dict[str, np.ndarray]:
        named: dict[str, np.ndarray] = {
            "meta.kind": np.full((1, 1, 1, 1), 1.0, dtype=np.float32),
            "meta.arch": np.array(
                [self.latent_channels, self.downsample_factor, self.hyper_channels, len(self.lambda_set)],
                dtype=np.float32,
            ).reshape(1, 4, 1, 1),
            "meta.lambda_set": np.asarray(self.lambda_set, dtype=np.float32).reshape(1, -1, 1, 1),
        }
        for group, layers in (
            ("analysis", self.analysis),
            ("synthesis", self.synthesis),
            ("hyper_enc", self.hyper_enc),
            ("hyper_dec", self.hyper_dec),
        ):
            for i, layer in enumerate(layers):
                named[f"{group}.{i}.kernel"] = layer.kernel.data
                named[f"{group}.{i}.bias"] = layer.bias.data
        for layer_id in sorted(self.lambda_table):
            for j, (scale, bias) in enumerate(self.lambda_table[layer_id]):
                named[f"cond.{j}.{layer_id}.scale"] = scale.data
                named[f"cond.{j}.{layer_id}.bias"] = bias.data
        named["z_prior.mean"] = self.z_prior[0].data
        named["z_prior.log_scale"] = self.z_prior[1].data
        return named

    def load_named(self, named: dict[str, np.ndarray]) -> None:
        mine = self.to_named()
        for name, arr in mine.items():
            if name.startswith("meta."):
                continue
            if name not in named:
                raise serialize.WeightsFormatError(f"missing tensor '{name}'")
            if named[name].shape != arr.shape:
                raise serialize.WeightsFormatError(
                    f"tensor '{name}' has shape {named[name].shape}, expected {arr.shape}"
                )
            arr[...] = named[name]

    def to_bytes(self) -> bytes:
        return serialize.serialize_named_tensors(self.to_named())

    def save(self, path) -> None:
        serialize.save_named_tensors(path, self.to_named())


def _he_kernel(rng: np.random.Generator, out_ch: int, in_ch: int, kh: int, kw: int, gain: float = 1.0):
    std = gain * np.sqrt(2.0 / (in_ch * kh * kw))
    return Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, kh, kw)).astype(np.float32))


def _zero_bias(ch: int, value: float = 0.0) -> Tensor:
    return Tensor(np.full((1, ch, 1, 1), value, dtype=np.float32))


def _conv(rng, in_ch, out_ch, k, stride=1, transpose=False, bias_value=0.0, gain=1.0) -> ConvLayer:
    if transpose:
        kernel = _he_kernel(rng, in_ch, out_ch, k, k, gain)
    else:
        kernel = _he_kernel(rng, out_ch, in_ch, k, k, gain)
    return ConvLayer(kernel=kernel, bias=_zero_bias(out_ch, bias_value), stride=stride, transpose=transpose)


_SOFTPLUS_ONE = float(np.log(np.expm1(1.0)))  # softplus(x) == 1


def init_autoencoder(
    latent_channels: int = 32,
    downsample_factor: int = 4,
    lambda_set=DEFAULT_LAMBDA_SET,
    hyper_channels: int | None = None,
    seed: int = 0,
) -> AutoencoderWeights:
    """Fresh desk-scale weights; conditional scales start as the identity."""
    steps = int(np.log2(downsample_factor))
    if 2**steps != downsample_factor or steps < 1:
        raise ConfigError(f"downsampling factor must be a power of two >= 2, got {downsample_factor}")
    if hyper_channels is None:
        hyper_channels = scaled_width(REFERENCE_HYPER_WIDTH, latent_channels)
    rng = np.random.default_rng(seed)
    c = latent_channels

    analysis = []
    in_ch = 3
    for _ in range(steps):
        analysis.append(_conv(rng, in_ch, c, 5, stride=2))
        in_ch = c
    synthesis = []
    for i in range(steps):
        out_ch = 3 if i == steps - 1 else c
        bias = 0.5 if i == steps - 1 else 0.0
        synthesis.append(_conv(rng, c, out_ch, 5, stride=2, transpose=True, bias_value=bias))

    hyper_enc = [
        _conv(rng, c, hyper_channels, 3, stride=1),
        _conv(rng, hyper_channels, hyper_channels, 5, stride=2),
        _conv(rng, hyper_channels, hyper_channels, 5, stride=2),
    ]
    hyper_dec = [
        _conv(rng, hyper_channels, hyper_channels, 5, stride=2, transpose=True),
        _conv(rng, hyper_channels, hyper_channels, 5, stride=2, transpose=True),
        _conv(rng, hyper_channels, 2 * c, 3, stride=1, gain=0.1),
    ]

    lambda_table: dict[str, list[tuple[Tensor, Tensor]]] = {}
    for group, layers in (("analysis", analysis), ("synthesis", synthesis)):
        for i, layer in enumerate(layers):
            pairs = []
            for _ in lambda_set:
                scale = Tensor(np.full((1, layer.out_channels, 1, 1), _SOFTPLUS_ONE, dtype=np.float32))
                bias = Tensor(np.zeros((1, layer.out_channels, 1, 1), dtype=np.float32))
                pairs.append((scale, bias))
            lambda_table[f"{group}.{i}"] = pairs

    z_prior = (
        Tensor(np.zeros((1, hyper_channels, 1, 1), dtype=np.float32)),
        Tensor(np.zeros((1, hyper_channels, 1, 1), dtype=np.float32)),
    )
    return AutoencoderWeights(
        analysis=analysis,
        synthesis=synthesis,
        lambda_table=lambda_table,
        hyper_enc=hyper_enc,
        hyper_dec=hyper_dec,
        z_prior=z_prior,
        lambda_set=tuple(float(v) for v in lambda_set),
        latent_channels=latent_channels,
        downsample_factor=downsample_factor,
        hyper_channels=hyper_channels,
    )


def load_autoencoder(path) -> AutoencoderWeights:
    named = serialize.load_named_tensors(path)
    if "meta.kind" not in named or int(named["meta.kind"].reshape(())) != 1:
        raise serialize.WeightsFormatError("not an auto-encoder weights file")
    arch = named["meta.arch"].reshape(-1).astype(int)
    lam = tuple(float(v) for v in named["meta.lambda_set"].reshape(-1))
    w = init_autoencoder(
        latent_channels=int(arch[0]),
        downsample_factor=int(arch[1]),
        lambda_set=lam,
        hyper_channels=int(arch[2]),
        seed=0,
    )
    w.load_named(named)
    return w


# ---------------------------------------------------------------------------
# Forward transforms
# ---------------------------------------------------------------------------


def conditional_scale(features: Tensor, rate: RateIndex, layer_id: str, weights: AutoencoderWeights) -> Tensor:
    """Per-channel softplus(scale) * features + bias, selected by rate index."""
    if layer_id not in weights.lambda_table:
        raise ConfigError(f"no conditional table for layer '{layer_id}'")
    scale, bias = weights.lambda_table[layer_id][rate.index]
    gain = expand_param(softplus(scale), features)
    return mul(gain, features) + expand_param(bias, features)


def _run_chain(x: Tensor, layers: list[ConvLayer]) -> Tensor:
    """Convolutions with leaky ReLU between them (none after the last)."""
    for i, layer in enumerate(layers):
        if i:
            x = leaky_relu(x, LEAKY_SLOPE)
        x = transpose_conv2d(x, layer) if layer.transpose else conv2d(x, layer)
    return x


def analyze(frame: Tensor, rate: RateIndex, weights: AutoencoderWeights) -> Tensor:
    """Frame (b, 3, H, W) in [0, 1] to latent (b, C, H/f, W/f)."""
    if frame.shape[1] != 3:
        raise ShapeError(f"frames have 3 channels, got {frame.shape[1]}")
    weights.latent_extents(frame.shape[2], frame.shape[3])
    if float(frame.data.min()) < 0.0 or float(frame.data.max()) > 1.0:
        raise ValueError("frame values must lie in [0, 1]")
    x = frame
    for i, layer in enumerate(weights.analysis):
        x = conv2d(x, layer)
        x = leaky_relu(x, LEAKY_SLOPE)
        x = conditional_scale(x, rate, f"analysis.{i}", weights)
    return x


def synthesis_transform(latent: Tensor, rate: RateIndex, weights: AutoencoderWeights) -> Tensor:
    """Latent tensor to a frame tensor clamped to [0, 1]."""
    x = latent
    for i, layer in enumerate(weights.synthesis):
        x = transpose_conv2d(x, layer)
        x = leaky_relu(x, LEAKY_SLOPE)
        x = conditional_scale(x, rate, f"synthesis.{i}", weights)
    return clamp(x, 0.0, 1.0)


def synthesize(latent: np.ndarray, rate: RateIndex, weights: AutoencoderWeights) -> Tensor:
    """Reconstruct a frame from an integer latent plane (C, h, w)."""
    latent = np.asarray(latent)
    if latent.ndim != 3 or latent.shape[0] != weights.latent_channels:
        raise ShapeError(
            f"latent plane must be ({weights.latent_channels}, h, w), got {latent.shape}"
        )
    return synthesis_transform(Tensor(latent[None].astype(np.float32)), rate, weights)


def hyper_synthesis(z: Tensor, weights: AutoencoderWeights, latent_h: int, latent_w: int) -> tuple[Tensor, Tensor]:
    """Hyper decoder output split into latent means and clamped log scales."""
    out = _run_chain(z, weights.hyper_dec)
    out = crop_hw(out, latent_h, latent_w)
    c = weights.latent_channels
    data = out
    mu = crop_channels(data, 0, c)
    log_scale = clamp(crop_channels(data, c, 2 * c), coder.LOG_SCALE_MIN, coder.LOG_SCALE_MAX)
    return mu, log_scale


def crop_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice as a graph operation."""
    y = np.ascontiguousarray(x.data[:, start:stop])

    def bwd(gy):
        g = np.zeros(x.shape, dtype=gy.dtype)
        g[:, start:stop] = gy
        return (g,)

    return _make_node(y, (x,), bwd)


def i_entropy_params(latent_hat: np.ndarray, rate: RateIndex, weights: AutoencoderWeights):
    """Hyper path for one quantized latent plane.

    Returns (mu, log_scale, z_hat, z_bits): the per-symbol Laplacian
    parameters predicted from the quantized hyper latent, the hyper latent
    itself, and its cross entropy under the channel-wise prior.
    """
    latent_hat = np.asarray(latent_hat)
    lt = Tensor(latent_hat[None].astype(np.float32))
    z = _run_chain(lt, weights.hyper_enc)
    z_hat = quantize_round(z)
    zt = Tensor(z_hat[None].astype(np.float32))
    mu, log_scale = hyper_synthesis(zt, weights, latent_hat.shape[1], latent_hat.shape[2])
    prior_mu, prior_ls = weights.z_prior
    z_bits = sum_all(
        laplace_nll_bits(
            zt,
            expand_param(prior_mu, zt),
            clamp(expand_param(prior_ls, zt), coder.LOG_SCALE_MIN, coder.LOG_SCALE_MAX),
        )
    ).item()
    return mu, log_scale, z_hat, z_bits


# ---------------------------------------------------------------------------
# I-frame coding
# ---------------------------------------------------------------------------


def _z_prior_pmfs(weights: AutoencoderWeights) -> list[coder.DiscretePmf]:
    mu = weights.z_prior[0].data.reshape(-1)
    ls = weights.z_prior[1].data.reshape(-1)
    rows = coder.discretize_laplacian_rows(mu, ls)
    return coder.pmfs_from_rows(rows, coder.DEFAULT_SUPPORT_MIN, coder.DEFAULT_SUPPORT_MAX)


def _plane_provider(mu: np.ndarray, log_scale: np.ndarray) -> coder.PmfProvider:
    rows = coder.discretize_laplacian_rows(mu.reshape(-1), log_scale.reshape(-1))
    pmfs = coder.pmfs_from_rows(rows, coder.DEFAULT_SUPPORT_MIN, coder.DEFAULT_SUPPORT_MAX)
    return coder.pmf_sequence(pmfs)


def compress_iframe(frame: np.ndarray, rate: RateIndex, weights: AutoencoderWeights):
    """Code one frame on its own; returns (chunk, latent_hat).

    ``frame`` is (3, H, W) float in [0, 1] with extents divisible by the
    downsampling factor. The latent plane is returned for the GOP buffer.
    """
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3:
        raise ShapeError(f"frame must be (3, H, W), got {frame.shape}")
    latent = analyze(Tensor(frame[None]), rate, weights)
    latent_hat = quantize_round(latent)
    mu, log_scale, z_hat, _ = i_entropy_params(latent_hat, rate, weights)
    z_stream = coder.encode_plane(z_hat, coder.per_channel_pmfs(_z_prior_pmfs(weights), z_hat.shape))
    y_stream = coder.encode_plane(latent_hat, _plane_provider(mu.data[0], log_scale.data[0]))
    return FrameChunk(FRAME_I, z_stream, y_stream), latent_hat


def decompress_iframe(chunk: FrameChunk, rate: RateIndex, weights: AutoencoderWeights, latent_shape):
    """Invert :func:`compress_iframe`; returns (frame tensor, latent_hat)."""
    c, h, w = latent_shape
    z_shape = weights.hyper_extents(h, w)
    z_hat = coder.decode_plane(chunk.z_stream, coder.per_channel_pmfs(_z_prior_pmfs(weights), z_shape), z_shape)
    zt = Tensor(z_hat[None].astype(np.float32))
    mu, log_scale = hyper_synthesis(zt, weights, h, w)
    latent_hat = coder.decode_plane(chunk.y_stream, _plane_provider(mu.data[0], log_scale.data[0]), (c, h, w))
    return synthesize(latent_hat, rate, weights), latent_hat
