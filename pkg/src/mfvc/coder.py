"""Lossless coding of integer symbol planes under per-symbol Laplacian models.

A carryless 32-bit range coder (byte-wise renormalization, 16-bit frequency
precision) consumes integer frequency tables discretized from Laplacian
distributions. Symbols outside a table's support are escaped through a
reserved overflow slot followed by a bypass-coded Exp-Golomb magnitude and
a side bit.

Coding of one stream is strictly serial; distinct streams may be coded
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

TOTAL_FREQ = 1 << 16
DEFAULT_SUPPORT_MIN = -127
DEFAULT_SUPPORT_MAX = 128
LOG_SCALE_MIN = -6.0
LOG_SCALE_MAX = 6.0

_TOP = 1 << 24
_BOT = 1 << 16
_MASK = 0xFFFFFFFF
_MAX_EG_PREFIX = 48


class CorruptStreamError(ValueError):
    """Raised when a coded stream cannot be decoded to the promised symbols."""


# ---------------------------------------------------------------------------
# Range coder
# ---------------------------------------------------------------------------


class RangeEncoder:
    """Carryless range encoder; call :meth:`finish` exactly once."""

    def __init__(self):
        self._buf = bytearray()
        self._low = 0
        self._range = _MASK

    def _normalize(self):
        low, rng, buf = self._low, self._range, self._buf
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            buf.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self._low, self._range = low, rng

    def encode(self, cum_lo: int, cum_hi: int, total: int = TOTAL_FREQ) -> None:
        """Narrow the coder to the interval [cum_lo, cum_hi) out of ``total``."""
        r = self._range // total
        self._low += r * cum_lo
        if cum_hi < total:
            self._range = r * (cum_hi - cum_lo)
        else:
            # Last interval absorbs the division slack.
            self._range -= r * cum_lo
        self._normalize()

    def encode_bit(self, bit: int) -> None:
        self.encode(bit, bit + 1, 2)

    def finish(self) -> bytes:
        low = self._low
        for _ in range(4):
            self._buf.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(self._buf)


class RangeDecoder:
    """Mirror of :class:`RangeEncoder` over an immutable byte buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = _MASK
        self._r = 1
        code = 0
        for _ in range(4):
            code = (code << 8) | self._read_byte()
        self._code = code

    def _read_byte(self) -> int:
        if self._pos >= len(self._data):
            raise CorruptStreamError("stream exhausted before all symbols were decoded")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def _normalize(self):
        low, rng, code = self._low, self._range, self._code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            code = ((code << 8) | self._read_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self._low, self._range, self._code = low, rng, code

    def decode_cum(self, total: int = TOTAL_FREQ) -> int:
        """Cumulative-frequency position of the next symbol; follow with consume()."""
        self._r = self._range // total
        cum = (self._code - self._low) // self._r
        return cum if cum < total else total - 1

    def consume(self, cum_lo: int, cum_hi: int, total: int = TOTAL_FREQ) -> None:
        r = self._r
        self._low += r * cum_lo
        if cum_hi < total:
            self._range = r * (cum_hi - cum_lo)
        else:
            self._range -= r * cum_lo
        self._normalize()

    def decode_bit(self) -> int:
        bit = 1 if self.decode_cum(2) >= 1 else 0
        self.consume(bit, bit + 1, 2)
        return bit


# ---------------------------------------------------------------------------
# Discretized Laplacian frequency tables
# ---------------------------------------------------------------------------


@dataclass
class DiscretePmf:
    """Integer frequency table over [support_min, support_max] plus overflow.

    Frequencies are all >= 1 and sum with ``overflow_freq`` to exactly 2^16,
    so every integer symbol is codable.
    """

    support_min: int
    support_max: int
    freq: np.ndarray
    overflow_freq: int
    _cum: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def cum(self) -> np.ndarray:
        """Cumulative table of length support+2; the final entry is 2^16."""
        if self._cum is None:
            s = len(self.freq)
            cum = np.empty(s + 2, dtype=np.int64)
            cum[0] = 0
            np.cumsum(self.freq, out=cum[1 : s + 1])
            cum[s + 1] = TOTAL_FREQ
            self._cum = cum
        return self._cum

    def validate(self) -> None:
        if not self.support_min <= 0 <= self.support_max:
            raise ValueError("support must contain zero")
        if len(self.freq) != self.support_max - self.support_min + 1:
            raise ValueError("frequency table length does not match support")
        if (self.freq < 1).any() or self.overflow_freq < 1:
            raise ValueError("all frequencies must be >= 1")
        if int(self.freq.sum()) + self.overflow_freq != TOTAL_FREQ:
            raise ValueError("frequencies must sum to 2^16")


def _sanitize(mu, log_scale):
    mu = np.nan_to_num(np.asarray(mu, dtype=np.float64), nan=0.0, posinf=1e6, neginf=-1e6)
    mu = np.clip(mu, -1e6, 1e6)
    ls = np.nan_to_num(np.asarray(log_scale, dtype=np.float64), nan=0.0)
    return mu, np.clip(ls, LOG_SCALE_MIN, LOG_SCALE_MAX)


def laplace_interval_probs(mu, log_scale, support_min: int, support_max: int):
    """Real-valued interval masses p(k) for k in the support, plus overflow mass.

    p(k) = F(k+1/2) - F(k-1/2) for the Laplacian CDF F with mean ``mu`` and
    scale exp(``log_scale``); the overflow mass is everything beyond the
    support on both sides. Inputs broadcast over a leading batch axis.
    """
    mu, ls = _sanitize(mu, log_scale)
    mu = np.atleast_1d(mu)
    b = np.exp(np.atleast_1d(ls))
    k = np.arange(support_min, support_max + 1, dtype=np.float64)
    d = k[None, :] - mu[:, None]
    bb = b[:, None]
    a = np.abs(d)
    tail = 0.5 * np.exp(-(a - 0.5) / bb) * (-np.expm1(-1.0 / bb))
    dc = np.clip(d, -0.5, 0.5)
    center = -0.5 * (np.expm1(-(0.5 - dc) / bb) + np.expm1(-(0.5 + dc) / bb))
    probs = np.where(a >= 0.5, tail, center)

    lo = (support_min - 0.5) - mu
    hi = (support_max + 0.5) - mu
    left = np.where(lo <= 0, 0.5 * np.exp(np.minimum(lo, 0) / b), 1.0 - 0.5 * np.exp(-np.maximum(lo, 0) / b))
    right = np.where(hi >= 0, 0.5 * np.exp(-np.maximum(hi, 0) / b), 1.0 - 0.5 * np.exp(np.minimum(hi, 0) / b))
    return probs, left + right


def quantize_rows(probs: np.ndarray) -> np.ndarray:
    """Largest-remainder quantization of probability rows to integer
    frequencies with floor 1 and exact row sums of 2^16."""
    probs = np.maximum(np.asarray(probs, dtype=np.float64), 0.0)
    sums = probs.sum(axis=1, keepdims=True)
    bad = sums[:, 0] <= 0
    if bad.any():
        probs[bad] = 1.0
        sums = probs.sum(axis=1, keepdims=True)
    target = probs / sums * TOTAL_FREQ
    base = np.floor(target).astype(np.int64)
    freqs = np.maximum(base, 1)
    diff = TOTAL_FREQ - freqs.sum(axis=1)

    over = diff > 0
    if over.any():
        rem = np.where(freqs == base, target - base, -1.0)
        order = np.argsort(-rem[over], axis=1, kind="stable")
        take = np.arange(probs.shape[1])[None, :] < diff[over, None]
        bump = np.zeros_like(freqs[over])
        np.put_along_axis(bump, order, take.astype(np.int64), axis=1)
        freqs[over] += bump

    under = diff < 0
    if under.any():
        rows = np.nonzero(under)[0]
        for i in rows:
            need = -int(diff[i])
            row = freqs[i]
            while need > 0:
                j = int(np.argmax(row))
                give = min(need, int(row[j]) - 1)
                if give <= 0:
                    raise ValueError("cannot renormalize frequency row")
                row[j] -= give
                need -= give
    return freqs


def discretize_laplacian_rows(mu, log_scale, support_min: int = DEFAULT_SUPPORT_MIN,
                              support_max: int = DEFAULT_SUPPORT_MAX) -> np.ndarray:
    """Frequency rows (one per (mu, log_scale) pair); the last column is the
    overflow frequency."""
    probs, overflow = laplace_interval_probs(mu, log_scale, support_min, support_max)
    return quantize_rows(np.concatenate([probs, overflow[:, None]], axis=1))


def discretize_laplacian(mu: float, log_scale: float, support_min: int = DEFAULT_SUPPORT_MIN,
                         support_max: int = DEFAULT_SUPPORT_MAX) -> DiscretePmf:
    """Integer frequency table for one Laplacian, floor 1 per symbol,
    largest-remainder renormalization to a total of exactly 2^16."""
    if support_min >= support_max:
        raise ValueError(f"support_min {support_min} must be below support_max {support_max}")
    if not support_min <= 0 <= support_max:
        raise ValueError("support must contain zero")
    row = discretize_laplacian_rows(float(mu), float(log_scale), support_min, support_max)[0]
    return DiscretePmf(support_min, support_max, row[:-1], int(row[-1]))


def pmfs_from_rows(rows: np.ndarray, support_min: int, support_max: int) -> list[DiscretePmf]:
    """Wrap precomputed frequency rows (overflow in the last column) with
    shared cumulative tables."""
    s = rows.shape[1] - 1
    cums = np.zeros((rows.shape[0], s + 2), dtype=np.int64)
    np.cumsum(rows[:, :-1], axis=1, out=cums[:, 1 : s + 1])
    cums[:, s + 1] = TOTAL_FREQ
    return [
        DiscretePmf(support_min, support_max, rows[i, :-1], int(rows[i, -1]), _cum=cums[i])
        for i in range(rows.shape[0])
    ]


# ---------------------------------------------------------------------------
# Plane coding
# ---------------------------------------------------------------------------


@dataclass
class CodedStream:
    """Range-coder output plus symbol accounting; the byte layout is the raw
    renormalization bytes with no internal framing."""

    data: bytes
    symbol_count: int
    bypass_bit_count: int


PmfProvider = Callable[[int, np.ndarray], DiscretePmf]


def pmf_sequence(pmfs) -> PmfProvider:
    return lambda i, prev: pmfs[i]


def constant_pmf(pmf: DiscretePmf) -> PmfProvider:
    return lambda i, prev: pmf


def per_channel_pmfs(pmfs, plane_shape) -> PmfProvider:
    """One PMF per channel of a (channels, h, w) plane flattened channel-major."""
    _, h, w = plane_shape
    n = h * w
    return lambda i, prev: pmfs[i // n]


def _encode_overflow(enc: RangeEncoder, value: int, support_min: int, support_max: int) -> int:
    if value > support_max:
        excess, side = value - support_max - 1, 1
    else:
        excess, side = support_min - 1 - value, 0
    n = excess + 1
    k = n.bit_length()
    for _ in range(k - 1):
        enc.encode_bit(0)
    for i in range(k - 1, -1, -1):
        enc.encode_bit((n >> i) & 1)
    enc.encode_bit(side)
    return 2 * k


def _decode_overflow(dec: RangeDecoder, support_min: int, support_max: int) -> int:
    zeros = 0
    while dec.decode_bit() == 0:
        zeros += 1
        if zeros > _MAX_EG_PREFIX:
            raise CorruptStreamError("malformed overflow magnitude")
    n = 1
    for _ in range(zeros):
        n = (n << 1) | dec.decode_bit()
    excess = n - 1
    side = dec.decode_bit()
    return support_max + 1 + excess if side else support_min - 1 - excess


def encode_symbol(enc: RangeEncoder, value: int, cum: np.ndarray, support_min: int, support_max: int) -> int:
    """Code one symbol against a cumulative table (layout of DiscretePmf.cum);
    returns the bypass bit count spent on an overflow escape (0 otherwise)."""
    s = support_max - support_min + 1
    if support_min <= value <= support_max:
        k = value - support_min
        enc.encode(int(cum[k]), int(cum[k + 1]))
        return 0
    enc.encode(int(cum[s]), TOTAL_FREQ)
    return _encode_overflow(enc, value, support_min, support_max)


def decode_symbol(dec: RangeDecoder, cum: np.ndarray, support_min: int, support_max: int) -> int:
    s = support_max - support_min + 1
    cv = dec.decode_cum()
    k = int(np.searchsorted(cum, cv, side="right")) - 1
    if k > s:
        k = s
    dec.consume(int(cum[k]), int(cum[k + 1]))
    if k == s:
        return _decode_overflow(dec, support_min, support_max)
    return support_min + k


def encode_plane(plane: np.ndarray, pmf_provider: PmfProvider) -> CodedStream:
    """Range-code an integer plane in channel-major raster order.

    The provider is called once per symbol with the index and the (already
    coded) symbol prefix, so adaptive models see the same context the
    decoder will reconstruct.
    """
    symbols = np.ascontiguousarray(np.asarray(plane, dtype=np.int64)).reshape(-1)
    enc = RangeEncoder()
    bypass = 0
    for i in range(symbols.size):
        pmf = pmf_provider(i, symbols[:i])
        bypass += encode_symbol(enc, int(symbols[i]), pmf.cum, pmf.support_min, pmf.support_max)
    return CodedStream(enc.finish(), symbols.size, bypass)


def decode_plane(stream: CodedStream, pmf_provider: PmfProvider, count_or_shape) -> np.ndarray:
    """Exact inverse of :func:`encode_plane` given the identical PMF sequence.

    ``count_or_shape`` is the symbol count or the plane shape to restore.
    """
    shape = None
    if isinstance(count_or_shape, (tuple, list)):
        shape = tuple(count_or_shape)
        count = int(np.prod(shape)) if shape else 0
    else:
        count = int(count_or_shape)
    out = np.zeros(count, dtype=np.int64)
    dec = RangeDecoder(stream.data)
    for i in range(count):
        pmf = pmf_provider(i, out[:i])
        out[i] = decode_symbol(dec, pmf.cum, pmf.support_min, pmf.support_max)
    plane = out.astype(np.int32)
    return plane.reshape(shape) if shape is not None else plane


def plane_cross_entropy(plane: np.ndarray, pmf_provider: PmfProvider) -> float:
    """Code length implied by the frequency tables, in bits.

    In-support symbols cost -log2(freq/2^16); overflow symbols cost the
    escape slot plus their bypass bits.
    """
    symbols = np.ascontiguousarray(np.asarray(plane, dtype=np.int64)).reshape(-1)
    bits = 0.0
    for i in range(symbols.size):
        v = int(symbols[i])
        pmf = pmf_provider(i, symbols[:i])
        if pmf.support_min <= v <= pmf.support_max:
            bits += -np.log2(float(pmf.freq[v - pmf.support_min]) / TOTAL_FREQ)
        else:
            excess = (v - pmf.support_max - 1) if v > pmf.support_max else (pmf.support_min - 1 - v)
            bits += -np.log2(float(pmf.overflow_freq) / TOTAL_FREQ)
            bits += 2 * (excess + 1).bit_length()
    return bits
