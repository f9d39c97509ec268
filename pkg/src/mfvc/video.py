"""GOP orchestration over the frame codec: padding, the latent buffer,
container serialization, and synthetic test sequences.

Every frame's latent is transmitted losslessly and the buffer holds the
previous frame's integer latent, never a lossy reconstruction, so decoded
quality is a function of the frame and the rate index alone; GOP position
cannot degrade it. P-frame encoding is sequentially dependent through the
latent buffer, but analysis transforms for future frames could be
precomputed concurrently; decoding is sequential within a GOP and
parallel across GOPs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .container import (
    FRAME_I,
    FRAME_P,
    HEADER_SIZE,
    ContainerError,
    DigestMismatchError,
    FrameChunk,
    VideoHeader,
    pack_flags,
    unpack_flags,
)
from .image import AutoencoderWeights, RateIndex, analyze, compress_iframe, decompress_iframe, synthesize
from .serialize import weights_digest
from .stem import StemFlags, StemWeights, decode_pframe, encode_pframe
from .tensor import ShapeError, Tensor, quantize_round


@dataclass(frozen=True)
class GopConfig:
    """Group-of-pictures layout plus the coding knobs shared by all frames."""

    gop_size: int
    rate: RateIndex
    flags: StemFlags = StemFlags()

    def __post_init__(self):
        if self.gop_size < 1:
            raise ValueError(f"gop_size must be >= 1, got {self.gop_size}")


@dataclass
class VideoBitstream:
    header: VideoHeader
    chunks: list[FrameChunk]

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + b"".join(c.to_bytes() for c in self.chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VideoBitstream":
        header = VideoHeader.from_bytes(data)
        chunks = []
        offset = HEADER_SIZE
        for i in range(header.frame_count):
            try:
                chunk, offset = FrameChunk.from_bytes(data, offset)
            except ContainerError as exc:
                raise ContainerError(f"frame {i}: {exc}") from exc
            chunks.append(chunk)
        return cls(header, chunks)

    @property
    def total_bits(self) -> int:
        return 8 * HEADER_SIZE + sum(c.total_bits for c in self.chunks)


def gop_schedule(frame_count: int, gop_size: int) -> list[int]:
    """Frame types for a sequence: frame t is I iff t mod gop_size == 0."""
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    if gop_size < 1:
        raise ValueError("gop_size must be >= 1")
    return [FRAME_I if t % gop_size == 0 else FRAME_P for t in range(frame_count)]


def pad_to_multiple(frame: np.ndarray, factor: int) -> np.ndarray:
    """Edge-replicate the bottom/right borders up to the next multiple."""
    _, h, w = frame.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return frame
    return np.pad(frame, ((0, 0), (0, ph), (0, pw)), mode="edge")


def _frames_to_float(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"video must be (frames, 3, H, W), got {frames.shape}")
    if frames.dtype == np.uint8:
        return frames.astype(np.float32) / 255.0
    frames = frames.astype(np.float32)
    if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
        raise ValueError("float frames must lie in [0, 1]")
    return frames


def _to_uint8(frame_tensor: Tensor) -> np.ndarray:
    return np.clip(np.rint(frame_tensor.data[0] * 255.0), 0, 255).astype(np.uint8)


def _stream_digest(weights: AutoencoderWeights, stem_weights: StemWeights) -> bytes:
    return weights_digest(weights.to_bytes(), stem_weights.to_bytes())


def compress_video(
    frames: np.ndarray,
    weights: AutoencoderWeights,
    stem_weights: StemWeights,
    cfg: GopConfig,
    return_latents: bool = False,
):
    """Code a whole sequence; I-frames stand alone, P-frames code the
    residual against the buffered previous latent.

    ``frames`` is (n, 3, H, W) uint8 (or float in [0, 1]); dimensions that
    do not divide the downsampling factor are padded by edge replication
    and recorded in the header.
    """
    if stem_weights.latent_channels != weights.latent_channels:
        raise ShapeError("auto-encoder and entropy-model latent channel counts differ")
    fl = _frames_to_float(frames)
    n, _, height, width = fl.shape
    header = VideoHeader(
        width=width,
        height=height,
        frame_count=n,
        gop_size=cfg.gop_size,
        rate_index=cfg.rate.index,
        latent_channels=weights.latent_channels,
        downsample_factor=weights.downsample_factor,
        flags=pack_flags(cfg.flags.use_spm, cfg.flags.use_tpm, cfg.flags.use_residual),
        model_digest=_stream_digest(weights, stem_weights),
    )
    schedule = gop_schedule(n, cfg.gop_size)
    chunks: list[FrameChunk] = []
    latents: list[np.ndarray] = []
    prev_latent: Optional[np.ndarray] = None
    for t in range(n):
        padded = pad_to_multiple(fl[t], weights.downsample_factor)
        if schedule[t] == FRAME_I:
            chunk, latent = compress_iframe(padded, cfg.rate, weights)
        else:
            latent = quantize_round(analyze(Tensor(padded[None]), cfg.rate, weights))
            chunk = encode_pframe(latent, prev_latent, cfg.flags, stem_weights)
        prev_latent = latent
        chunks.append(chunk)
        latents.append(latent)
    stream = VideoBitstream(header, chunks)
    return (stream, latents) if return_latents else stream


def iter_decompress_video(
    stream: VideoBitstream,
    weights: AutoencoderWeights,
    stem_weights: StemWeights,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (uint8 frame, latent plane) pairs in display order.

    Raises :class:`DigestMismatchError` before yielding anything if the
    weights do not match the stream; a corrupted chunk only stops the
    iteration at its own frame index.
    """
    header = stream.header
    if header.model_digest != _stream_digest(weights, stem_weights):
        raise DigestMismatchError(
            "model digest mismatch: the stream was encoded with different weights"
        )
    if header.latent_channels != weights.latent_channels or header.downsample_factor != weights.downsample_factor:
        raise DigestMismatchError("stream geometry does not match the weights")
    rate = weights.rate(header.rate_index)
    flags = StemFlags(*unpack_flags(header.flags))
    f = header.downsample_factor
    lat_h = -(-header.height // f)
    lat_w = -(-header.width // f)
    latent_shape = (header.latent_channels, lat_h, lat_w)

    prev_latent: Optional[np.ndarray] = None
    for t, chunk in enumerate(stream.chunks):
        try:
            if chunk.frame_type == FRAME_I:
                frame_t, latent = decompress_iframe(chunk, rate, weights, latent_shape)
            else:
                if prev_latent is None:
                    raise ContainerError("P-frame without a preceding I-frame")
                latent = decode_pframe(chunk, prev_latent, flags, stem_weights)
                frame_t = synthesize(latent, rate, weights)
        except (ContainerError, ValueError) as exc:
            raise ContainerError(f"frame {t}: {exc}") from exc
        prev_latent = latent
        frame = _to_uint8(frame_t)[:, : header.height, : header.width]
        yield frame, latent


def decompress_video(
    stream: VideoBitstream,
    weights: AutoencoderWeights,
    stem_weights: StemWeights,
    max_frames: Optional[int] = None,
    return_latents: bool = False,
):
    """Decode a bitstream to (n, 3, H, W) uint8 frames."""
    frames: list[np.ndarray] = []
    latents: list[np.ndarray] = []
    for frame, latent in iter_decompress_video(stream, weights, stem_weights):
        frames.append(frame)
        latents.append(latent)
        if max_frames is not None and len(frames) >= max_frames:
            break
    out = np.stack(frames) if frames else np.zeros((0, 3, stream.header.height, stream.header.width), np.uint8)
    return (out, latents) if return_latents else out


# ---------------------------------------------------------------------------
# Synthetic sequences
# ---------------------------------------------------------------------------


def _smooth_texture(rng: np.random.Generator, h: int, w: int, cell: int = 8) -> np.ndarray:
    coarse = rng.random((3, h // cell + 2, w // cell + 2))
    up = np.repeat(np.repeat(coarse, cell, axis=1), cell, axis=2)
    up = gaussian_filter(up, sigma=(0, cell / 2, cell / 2))
    up = up[:, :h, :w]
    lo, hi = up.min(), up.max()
    return (up - lo) / max(hi - lo, 1e-9)


def synth_sequence(kind: str, n_frames: int, h: int, w: int, seed: int,
                   shift: int = 2, noise_sigma: float = 8.0) -> np.ndarray:
    """Deterministic synthetic uint8 sequences for desk-scale experiments.

    ``translate`` slides a window over a smooth texture by ``shift`` pixels
    per frame, ``zoom`` rescales around the center, and ``noise_static``
    adds fresh i.i.d. noise to a fixed texture each frame.
    """
    if h < 1 or w < 1 or n_frames < 1:
        raise ValueError("sequence dimensions must be positive")
    rng = np.random.default_rng(seed)
    if kind == "translate":
        big = _smooth_texture(rng, h, w + shift * max(n_frames - 1, 0) + 1)
        frames = np.stack([big[:, :, t * shift : t * shift + w] for t in range(n_frames)])
    elif kind == "zoom":
        big = _smooth_texture(rng, 2 * h, 2 * w)
        cy, cx = h, w
        ys = np.arange(h) - h / 2
        xs = np.arange(w) - w / 2
        frames = np.zeros((n_frames, 3, h, w))
        for t in range(n_frames):
            scale = 1.0 + 0.03 * t
            iy = np.clip(np.rint(cy + ys / scale).astype(int), 0, 2 * h - 1)
            ix = np.clip(np.rint(cx + xs / scale).astype(int), 0, 2 * w - 1)
            frames[t] = big[:, iy[:, None], ix[None, :]]
    elif kind == "noise_static":
        base = _smooth_texture(rng, h, w)
        frames = base[None] + rng.normal(0.0, noise_sigma / 255.0, size=(n_frames, 3, h, w))
    else:
        raise ValueError(f"unknown sequence kind '{kind}'")
    return np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)


def synth_clips(kind: str, n_clips: int, frames_per_clip: int, h: int, w: int, seed: int,
                shift: int = 2) -> list[np.ndarray]:
    """Independent clips (different seeds) for P-frame training."""
    return [
        synth_sequence(kind, frames_per_clip, h, w, seed + 1000 * i, shift=shift)
        for i in range(n_clips)
    ]


def evaluate_video(
    stream: VideoBitstream,
    original: np.ndarray,
    weights: AutoencoderWeights,
    stem_weights: StemWeights,
) -> list[dict]:
    """Per-frame rate and quality rows (the data behind quality-vs-time plots).

    Bits per frame include the chunk framing; the container header is
    reported once on the first row as header_bits.
    """
    from . import metrics

    original = np.asarray(original)
    decoded = decompress_video(stream, weights, stem_weights)
    if decoded.shape != original.shape:
        raise ShapeError(f"original shape {original.shape} does not match decoded {decoded.shape}")
    rows = []
    for t, chunk in enumerate(stream.chunks):
        rows.append(
            {
                "frame_index": t,
                "frame_type": "I" if chunk.frame_type == FRAME_I else "P",
                "bits": chunk.total_bits,
                "bpp": metrics.bpp(chunk.total_bits, stream.header.width, stream.header.height, 1),
                "psnr": metrics.psnr(original[t], decoded[t]),
                "ms_ssim": metrics.ms_ssim(original[t], decoded[t], scales=_max_scales(stream.header)),
            }
        )
    assert stream.total_bits == 8 * HEADER_SIZE + sum(r["bits"] for r in rows)
    return rows


def _max_scales(header: VideoHeader) -> int:
    side = min(header.width, header.height)
    scales = 1
    while scales < 5 and side >= 2 ** scales * 11:
        scales += 1
    return scales
