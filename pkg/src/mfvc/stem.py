"""Spatiotemporal entropy model for P-frame latents.

P-frames transmit the integer residual between the current and previous
latent planes. Its symbol distributions come from three fused sources: a
joint hyper-prior over both latents, a temporal prior extracted from the
previous latent, and a causal spatial prior over the residual itself.
Because the spatial prior is autoregressive, decoding walks spatial
positions serially, recomputing the causal context from already-decoded
symbols; hyper and temporal features for a frame are computed once and may
be prepared concurrently, while different groups of pictures decode
independently.

The model is rate-agnostic: one set of weights serves every rate index of
the auto-encoder that produced the latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import coder, serialize
from .container import FRAME_P, FrameChunk
from .image import LEAKY_SLOPE, _conv, _run_chain, crop_channels, scaled_width
from .tensor import (
    ConvLayer,
    ShapeError,
    Tensor,
    add_uniform_noise,
    causal_mask,
    clamp,
    concat_channels,
    crop_hw,
    expand_param,
    laplace_nll_bits,
    masked_conv2d,
    round_half_away,
    sum_all,
)

# Channel widths of the full-size model; desk models scale them by C/320.
_PHE_WIDTH = 256
_PHD_WIDTH = 256
_TPM_WIDTHS = (426, 533)
_EPM_WIDTHS = (1600, 1280)
_SPM_KERNEL = 5


@dataclass(frozen=True)
class StemFlags:
    """Branch switches; disabled branches feed zeros into the fusion, and
    ``use_residual=False`` codes the current latent directly."""

    use_spm: bool = True
    use_tpm: bool = True
    use_residual: bool = True


@dataclass
class StemWeights:
    phe: list[ConvLayer]
    phd: list[ConvLayer]
    tpm: list[ConvLayer]
    spm: ConvLayer
    epm: list[ConvLayer]
    z_prior: tuple[Tensor, Tensor]
    latent_channels: int

    @property
    def hyper_channels(self) -> int:
        return self.phe[-1].out_channels

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.phe + self.phd + self.tpm + [self.spm] + self.epm:
            params.extend(layer.parameters())
        params.extend(self.z_prior)
        return params

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def hyper_extents(self, latent_h: int, latent_w: int) -> tuple[int, int, int]:
        h, w = latent_h, latent_w
        for layer in self.phe:
            h = -(-h // layer.stride)
            w = -(-w // layer.stride)
        return self.hyper_channels, h, w

    def to_named(self) -> dict[str, np.ndarray]:
        named: dict[str, np.ndarray] = {
            "meta.kind": np.full((1, 1, 1, 1), 2.0, dtype=np.float32),
            "meta.arch": np.array([self.latent_channels, 0, 0, 0], dtype=np.float32).reshape(1, 4, 1, 1),
        }
        groups = (("phe", self.phe), ("phd", self.phd), ("tpm", self.tpm), ("spm", [self.spm]), ("epm", self.epm))
        for group, layers in groups:
            for i, layer in enumerate(layers):
                named[f"{group}.{i}.kernel"] = layer.kernel.data
                named[f"{group}.{i}.bias"] = layer.bias.data
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


def init_stem(latent_channels: int = 32, seed: int = 0) -> StemWeights:
    """Fresh weights with channel widths scaled from the full-size layout."""
    rng = np.random.default_rng(seed)
    c = latent_channels
    hc = scaled_width(_PHE_WIDTH, c)
    t1, t2 = (scaled_width(v, c) for v in _TPM_WIDTHS)
    e1, e2 = (scaled_width(v, c) for v in _EPM_WIDTHS)

    phe = [
        _conv(rng, 2 * c, hc, 3, stride=1),
        _conv(rng, hc, hc, 5, stride=2),
        _conv(rng, hc, hc, 5, stride=2),
    ]
    phd = [
        _conv(rng, hc, hc, 5, stride=2, transpose=True),
        _conv(rng, hc, hc, 5, stride=2, transpose=True),
        _conv(rng, hc, 2 * c, 3, stride=1, gain=0.1),
    ]
    tpm = [
        _conv(rng, c, t1, 5, stride=1),
        _conv(rng, t1, t2, 5, stride=1),
        _conv(rng, t2, 2 * c, 5, stride=1, gain=0.1),
    ]
    spm_kernel = _conv(rng, c, 2 * c, _SPM_KERNEL, stride=1, gain=0.1)
    spm = ConvLayer(
        kernel=spm_kernel.kernel,
        bias=spm_kernel.bias,
        stride=1,
        mask=causal_mask(_SPM_KERNEL, _SPM_KERNEL),
    )
    epm = [
        _conv(rng, 6 * c, e1, 1),
        _conv(rng, e1, e2, 1),
        _conv(rng, e2, 2 * c, 1, gain=0.05),
    ]
    z_prior = (
        Tensor(np.zeros((1, hc, 1, 1), dtype=np.float32)),
        Tensor(np.zeros((1, hc, 1, 1), dtype=np.float32)),
    )
    return StemWeights(phe=phe, phd=phd, tpm=tpm, spm=spm, epm=epm, z_prior=z_prior, latent_channels=c)


def load_stem(path) -> StemWeights:
    named = serialize.load_named_tensors(path)
    if "meta.kind" not in named or int(named["meta.kind"].reshape(())) != 2:
        raise serialize.WeightsFormatError("not a spatiotemporal-model weights file")
    arch = named["meta.arch"].reshape(-1).astype(int)
    w = init_stem(latent_channels=int(arch[0]), seed=0)
    w.load_named(named)
    return w


# ---------------------------------------------------------------------------
# Latent arithmetic
# ---------------------------------------------------------------------------


def _check_planes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"latent planes differ in shape: {a.shape} vs {b.shape}")


def residual_latent(latent: np.ndarray, prev_latent: np.ndarray) -> np.ndarray:
    """Exact integer difference between consecutive latent planes."""
    latent = np.asarray(latent, dtype=np.int32)
    prev_latent = np.asarray(prev_latent, dtype=np.int32)
    _check_planes(latent, prev_latent)
    return latent - prev_latent


def reconstruct_latent(residual: np.ndarray, prev_latent: np.ndarray) -> np.ndarray:
    """Exact integer inverse of :func:`residual_latent`."""
    residual = np.asarray(residual, dtype=np.int32)
    prev_latent = np.asarray(prev_latent, dtype=np.int32)
    _check_planes(residual, prev_latent)
    return residual + prev_latent


def _as_batch(plane: np.ndarray) -> np.ndarray:
    arr = np.asarray(plane)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"latents must be (C, h, w) or (b, C, h, w), got {arr.shape}")
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# Prior branches
# ---------------------------------------------------------------------------


def hyper_encode(latent: np.ndarray, prev_latent: np.ndarray, weights: StemWeights):
    """Quantized joint hyper latent and its prior cross entropy in bits."""
    lt = Tensor(_as_batch(latent))
    pv = Tensor(_as_batch(prev_latent))
    z = _run_chain(concat_channels(lt, pv), weights.phe)
    z_hat = round_half_away(z.data[0] if z.shape[0] == 1 else z.data)
    zt = Tensor(_as_batch(z_hat))
    z_bits = sum_all(_z_prior_nll(zt, weights)).item()
    return z_hat, z_bits


def _z_prior_nll(zt: Tensor, weights: StemWeights) -> Tensor:
    mu, ls = weights.z_prior
    return laplace_nll_bits(
        zt,
        expand_param(mu, zt),
        clamp(expand_param(ls, zt), coder.LOG_SCALE_MIN, coder.LOG_SCALE_MAX),
    )


def temporal_prior(prev_latent: np.ndarray, weights: StemWeights) -> Tensor:
    """Stride-1 feature stack over the previous latent; extents preserved."""
    return _run_chain(Tensor(_as_batch(prev_latent)), weights.tpm)


def spatial_prior(residual_plane: np.ndarray, weights: StemWeights) -> Tensor:
    """Causal masked convolution over the plane being coded."""
    return masked_conv2d(Tensor(_as_batch(residual_plane)), weights.spm)


def entropy_params(
    phd_out: Optional[Tensor],
    spm_out: Optional[Tensor],
    tpm_out: Optional[Tensor],
    flags: StemFlags,
    weights: StemWeights,
) -> tuple[Tensor, Tensor]:
    """Fuse the hyper, spatial and temporal features into per-symbol
    Laplacian parameters (mean, clamped log scale).

    Disabled branches (or ``None`` inputs) are replaced by zero tensors of
    the right shape, so one weight layout serves every ablation.
    """
    ref = next(t for t in (phd_out, spm_out, tpm_out) if t is not None)
    zeros = None

    def branch(t: Optional[Tensor], enabled: bool) -> Tensor:
        nonlocal zeros
        if enabled and t is not None:
            if t.shape[2:] != ref.shape[2:]:
                raise ShapeError(f"fusion extents differ: {t.shape} vs {ref.shape}")
            return t
        if zeros is None:
            zeros = Tensor(np.zeros((ref.shape[0], 2 * weights.latent_channels) + ref.shape[2:], dtype=np.float32))
        return zeros

    fused = concat_channels(
        concat_channels(branch(phd_out, True), branch(spm_out, flags.use_spm)),
        branch(tpm_out, flags.use_tpm),
    )
    out = _run_chain(fused, weights.epm)
    c = weights.latent_channels
    mu = crop_channels(out, 0, c)
    log_scale = clamp(crop_channels(out, c, 2 * c), coder.LOG_SCALE_MIN, coder.LOG_SCALE_MAX)
    return mu, log_scale


# ---------------------------------------------------------------------------
# Rate estimation (training and eval)
# ---------------------------------------------------------------------------


def _rate_forward(latent, prev_latent, flags: StemFlags, weights: StemWeights,
                  training: bool, noise_seed: int) -> tuple[Tensor, Tensor]:
    """Elementwise (latent nll, hyper nll) tensors for one P-frame."""
    dtype = weights.spm.kernel.dtype
    lt = Tensor(_as_batch(latent).astype(dtype), dtype=dtype)
    pv = Tensor(_as_batch(prev_latent).astype(dtype), dtype=dtype)
    if lt.shape != pv.shape:
        raise ShapeError(f"latent extents differ: {lt.shape} vs {pv.shape}")
    _, _, h, w = lt.shape

    z = _run_chain(concat_channels(lt, pv), weights.phe)
    if training:
        z_tilde = add_uniform_noise(z, noise_seed)
    else:
        z_tilde = Tensor(round_half_away(z.data).astype(dtype), dtype=dtype)
    z_nll = _z_prior_nll(z_tilde, weights)

    phd_out = crop_hw(_run_chain(z_tilde, weights.phd), h, w)
    plane = lt - pv if flags.use_residual else lt
    spm_out = masked_conv2d(plane, weights.spm) if flags.use_spm else None
    tpm_out = _run_chain(pv, weights.tpm) if flags.use_tpm else None
    mu, log_scale = entropy_params(phd_out, spm_out, tpm_out, flags, weights)
    return laplace_nll_bits(plane, mu, log_scale), z_nll


def p_frame_rate(
    latent: np.ndarray,
    prev_latent: np.ndarray,
    flags: StemFlags,
    weights: StemWeights,
    training: bool = False,
    noise_seed: int = 0,
) -> tuple[Tensor, Tensor]:
    """Differentiable estimate of (latent bits, hyper bits) for one P-frame.

    In training mode the hyper latent uses the additive-noise surrogate;
    in eval mode it is rounded. The spatial prior always sees the true
    integer plane being coded, which matches the serial decoder exactly
    because that plane is transmitted losslessly.
    """
    y_nll, z_nll = _rate_forward(latent, prev_latent, flags, weights, training, noise_seed)
    return sum_all(y_nll), sum_all(z_nll)


def p_frame_symbol_bits(latent: np.ndarray, prev_latent: np.ndarray, flags: StemFlags,
                        weights: StemWeights) -> tuple[np.ndarray, float]:
    """Per-symbol rate estimate for one frame: ((C, h, w) bits plane,
    hyper bits). Feeds the entropy heatmaps."""
    y_nll, z_nll = _rate_forward(latent, prev_latent, flags, weights, training=False, noise_seed=0)
    if y_nll.shape[0] != 1:
        raise ShapeError("per-symbol bits need a single plane, not a batch")
    return y_nll.data[0].astype(np.float64), sum_all(z_nll).item()


# ---------------------------------------------------------------------------
# Serial coding
# ---------------------------------------------------------------------------


class _PositionParams:
    """Per-position fusion shared by the encoder and the serial decoder.

    Both sides must produce bit-identical Laplacian parameters, so the same
    matrix-vector code runs position by position during encoding and
    decoding; the causal mask guarantees untransmitted positions contribute
    exact zeros either way.
    """

    def __init__(self, weights: StemWeights, flags: StemFlags, phd_feat: np.ndarray, tpm_feat: Optional[np.ndarray]):
        c = weights.latent_channels
        self.c = c
        self.flags = flags
        self.phd = phd_feat
        self.tpm = tpm_feat
        self.pad = _SPM_KERNEL // 2
        kd = weights.spm.kernel.data * weights.spm.mask
        self.spm_mat = np.ascontiguousarray(kd.reshape(2 * c, -1).T)  # (C*k*k, 2C)
        self.spm_bias = weights.spm.bias.data.reshape(-1)
        self.epm = [
            (np.ascontiguousarray(l.kernel.data.reshape(l.out_channels, l.in_channels)), l.bias.data.reshape(-1))
            for l in weights.epm
        ]
        self.zeros = np.zeros(2 * c, dtype=np.float32)
        self.slope = np.float32(LEAKY_SLOPE)

    def at(self, padded_plane: np.ndarray, r: int, col: int) -> tuple[np.ndarray, np.ndarray]:
        k = _SPM_KERNEL
        if self.flags.use_spm:
            patch = padded_plane[:, r : r + k, col : col + k].reshape(-1)
            spm_vec = patch @ self.spm_mat + self.spm_bias
        else:
            spm_vec = self.zeros
        tpm_vec = self.tpm[:, r, col] if self.tpm is not None else self.zeros
        x = np.concatenate([self.phd[:, r, col], spm_vec, tpm_vec])
        for i, (mat, bias) in enumerate(self.epm):
            if i:
                x = np.where(x < 0, x * self.slope, x)
            x = mat @ x + bias
        mu = x[: self.c]
        log_scale = np.clip(x[self.c :], coder.LOG_SCALE_MIN, coder.LOG_SCALE_MAX)
        return mu, log_scale


def _rows_cum(rows: np.ndarray) -> np.ndarray:
    s = rows.shape[1] - 1
    cums = np.zeros((rows.shape[0], s + 2), dtype=np.int64)
    np.cumsum(rows[:, :-1], axis=1, out=cums[:, 1 : s + 1])
    cums[:, s + 1] = coder.TOTAL_FREQ
    return cums


def _z_prior_pmfs(weights: StemWeights) -> list[coder.DiscretePmf]:
    mu = weights.z_prior[0].data.reshape(-1)
    ls = weights.z_prior[1].data.reshape(-1)
    rows = coder.discretize_laplacian_rows(mu, ls)
    return coder.pmfs_from_rows(rows, coder.DEFAULT_SUPPORT_MIN, coder.DEFAULT_SUPPORT_MAX)


def _frame_features(z_hat: np.ndarray, prev_latent: np.ndarray, flags: StemFlags, weights: StemWeights):
    """Hyper-decoder and temporal features, computed once per frame."""
    h, w = prev_latent.shape[1], prev_latent.shape[2]
    phd = crop_hw(_run_chain(Tensor(_as_batch(z_hat)), weights.phd), h, w).data[0]
    tpm = temporal_prior(prev_latent, weights).data[0] if flags.use_tpm else None
    return phd, tpm


def encode_pframe(latent: np.ndarray, prev_latent: np.ndarray, flags: StemFlags, weights: StemWeights) -> FrameChunk:
    """Code one P-frame latent against the buffered previous latent.

    The coded plane is the integer residual (or the latent itself when
    ``use_residual`` is off); its symbols go out position by position in
    spatial raster order, all channels of a position together, so the
    serial decoder can rebuild the causal context as it goes.
    """
    latent = np.asarray(latent, dtype=np.int32)
    prev_latent = np.asarray(prev_latent, dtype=np.int32)
    _check_planes(latent, prev_latent)
    c, h, w = latent.shape

    z_hat, _ = hyper_encode(latent, prev_latent, weights)
    z_stream = coder.encode_plane(z_hat, coder.per_channel_pmfs(_z_prior_pmfs(weights), z_hat.shape))

    plane = residual_latent(latent, prev_latent) if flags.use_residual else latent
    phd, tpm = _frame_features(z_hat, prev_latent, flags, weights)
    pos = _PositionParams(weights, flags, phd, tpm)

    pad = pos.pad
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    padded[:, pad : pad + h, pad : pad + w] = plane

    enc = coder.RangeEncoder()
    bypass = 0
    for r in range(h):
        for col in range(w):
            mu, log_scale = pos.at(padded, r, col)
            rows = coder.discretize_laplacian_rows(mu, log_scale)
            cums = _rows_cum(rows)
            for ch in range(c):
                bypass += coder.encode_symbol(
                    enc, int(plane[ch, r, col]), cums[ch], coder.DEFAULT_SUPPORT_MIN, coder.DEFAULT_SUPPORT_MAX
                )
    y_stream = coder.CodedStream(enc.finish(), c * h * w, bypass)
    return FrameChunk(FRAME_P, z_stream, y_stream)


def decode_pframe(chunk: FrameChunk, prev_latent: np.ndarray, flags: StemFlags, weights: StemWeights) -> np.ndarray:
    """Exact inverse of :func:`encode_pframe` for the same weights, flags
    and previous latent.

    A mismatched previous latent is not detected; it yields garbage from
    the first diverging position onward.
    """
    prev_latent = np.asarray(prev_latent, dtype=np.int32)
    c, h, w = prev_latent.shape

    z_shape = weights.hyper_extents(h, w)
    z_hat = coder.decode_plane(chunk.z_stream, coder.per_channel_pmfs(_z_prior_pmfs(weights), z_shape), z_shape)

    phd, tpm = _frame_features(z_hat, prev_latent, flags, weights)
    pos = _PositionParams(weights, flags, phd, tpm)

    pad = pos.pad
    plane = np.zeros((c, h, w), dtype=np.int32)
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)

    dec = coder.RangeDecoder(chunk.y_stream.data)
    for r in range(h):
        for col in range(w):
            mu, log_scale = pos.at(padded, r, col)
            rows = coder.discretize_laplacian_rows(mu, log_scale)
            cums = _rows_cum(rows)
            for ch in range(c):
                v = coder.decode_symbol(dec, cums[ch], coder.DEFAULT_SUPPORT_MIN, coder.DEFAULT_SUPPORT_MAX)
                plane[ch, r, col] = v
                padded[ch, r + pad, col + pad] = v
    return reconstruct_latent(plane, prev_latent) if flags.use_residual else plane
