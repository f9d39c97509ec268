import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfvc.coder import (
    TOTAL_FREQ,
    CodedStream,
    CorruptStreamError,
    DiscretePmf,
    RangeDecoder,
    RangeEncoder,
    constant_pmf,
    decode_plane,
    discretize_laplacian,
    discretize_laplacian_rows,
    encode_plane,
    laplace_interval_probs,
    per_channel_pmfs,
    plane_cross_entropy,
    pmf_sequence,
    pmfs_from_rows,
)


def uniform_pmf_256():
    freq = np.full(256, 255, dtype=np.int64)
    return DiscretePmf(-127, 128, freq, TOTAL_FREQ - 256 * 255)


class TestDiscretization:
    def test_unit_scale_closed_form(self):
        # Laplacian CDF: F(x) = 1/2 + sign(x) * (1 - e^{-|x|}) / 2 at mu=0, b=1.
        probs, _ = laplace_interval_probs(0.0, 0.0, -8, 8)
        p = probs[0]
        k0 = 8  # index of symbol 0
        assert p[k0] == pytest.approx(1.0 - np.exp(-0.5), abs=1e-4)
        assert p[k0] == pytest.approx(0.39347, abs=1e-4)
        assert p[k0 + 1] == pytest.approx(0.5 * np.exp(-0.5) - 0.5 * np.exp(-1.5), abs=1e-4)
        assert p[k0 + 1] == pytest.approx(0.19170, abs=1e-4)

    def test_symmetry_at_zero_mean(self):
        probs, _ = laplace_interval_probs(0.0, 0.7, -16, 16)
        p = probs[0]
        np.testing.assert_allclose(p, p[::-1], rtol=1e-12)

    def test_mass_sums_to_one(self):
        for mu, ls in [(0.0, 0.0), (3.3, -2.0), (-40.0, 1.5), (200.0, 6.0)]:
            probs, overflow = laplace_interval_probs(mu, ls, -127, 128)
            assert probs[0].sum() + overflow[0] == pytest.approx(1.0, abs=1e-9)

    def test_frequencies_sum_exactly(self):
        pmf = discretize_laplacian(0.0, 0.0)
        pmf.validate()
        assert int(pmf.freq.sum()) + pmf.overflow_freq == TOTAL_FREQ
        assert (pmf.freq >= 1).all()

    @given(
        mu=st.floats(-200, 200),
        ls=st.floats(-10, 10),
        half=st.integers(1, 160),
    )
    @settings(max_examples=150, deadline=None)
    def test_frequency_invariants_hold_everywhere(self, mu, ls, half):
        pmf = discretize_laplacian(mu, ls, -half, half)
        pmf.validate()

    def test_extreme_mu_is_still_codable(self):
        pmf = discretize_laplacian(1e9, 0.0, -4, 4)
        pmf.validate()
        assert pmf.overflow_freq > TOTAL_FREQ // 2

    def test_batch_rows_match_scalar(self):
        mus = np.array([0.0, 1.2, -3.4, 50.0])
        lss = np.array([0.0, -2.0, 2.0, 5.0])
        rows = discretize_laplacian_rows(mus, lss, -32, 32)
        for i in range(4):
            single = discretize_laplacian(float(mus[i]), float(lss[i]), -32, 32)
            np.testing.assert_array_equal(rows[i, :-1], single.freq)
            assert int(rows[i, -1]) == single.overflow_freq

    def test_invalid_support_rejected(self):
        with pytest.raises(ValueError):
            discretize_laplacian(0.0, 0.0, 5, 4)
        with pytest.raises(ValueError):
            discretize_laplacian(0.0, 0.0, 1, 8)


class TestRoundtrip:
    def test_random_planes_roundtrip(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(1, 80))
            mu = float(rng.uniform(-20, 20))
            ls = float(rng.uniform(-6, 6))
            pmf = discretize_laplacian(mu, ls, -64, 64)
            if rng.random() < 0.5:
                symbols = rng.integers(-64, 65, size=n, dtype=np.int64)
            else:
                symbols = rng.integers(-300, 300, size=n, dtype=np.int64)
            stream = encode_plane(symbols, constant_pmf(pmf))
            out = decode_plane(stream, constant_pmf(pmf), n)
            np.testing.assert_array_equal(out, symbols)

    def test_empty_plane(self):
        pmf = discretize_laplacian(0.0, 0.0)
        stream = encode_plane(np.zeros((0,), dtype=np.int32), constant_pmf(pmf))
        assert stream.symbol_count == 0
        out = decode_plane(stream, constant_pmf(pmf), 0)
        assert out.size == 0

    def test_far_overflow_survives(self):
        pmf = discretize_laplacian(0.0, 1.0, -64, 64)
        plane = np.array([10000, -9999, 0, 65], dtype=np.int64)
        stream = encode_plane(plane, constant_pmf(pmf))
        assert stream.bypass_bit_count > 0
        out = decode_plane(stream, constant_pmf(pmf), 4)
        np.testing.assert_array_equal(out, plane)

    def test_plane_shape_restored(self):
        rng = np.random.default_rng(7)
        plane = rng.integers(-5, 6, size=(3, 4, 5), dtype=np.int32)
        pmf = discretize_laplacian(0.0, 1.0)
        stream = encode_plane(plane, constant_pmf(pmf))
        out = decode_plane(stream, constant_pmf(pmf), (3, 4, 5))
        np.testing.assert_array_equal(out, plane)

    def test_per_channel_provider(self):
        rng = np.random.default_rng(8)
        plane = rng.integers(-10, 11, size=(3, 6, 6), dtype=np.int32)
        rows = discretize_laplacian_rows(np.array([0.0, 2.0, -2.0]), np.array([0.5, 1.0, 1.5]), -32, 32)
        pmfs = pmfs_from_rows(rows, -32, 32)
        provider = per_channel_pmfs(pmfs, plane.shape)
        stream = encode_plane(plane, provider)
        out = decode_plane(stream, provider, plane.shape)
        np.testing.assert_array_equal(out, plane)

    def test_adaptive_provider_sees_prefix(self):
        # PMF choice depends on the previous symbol; decoding must still work.
        sharp = discretize_laplacian(0.0, -2.0, -32, 32)
        wide = discretize_laplacian(0.0, 2.0, -32, 32)

        def provider(i, prev):
            if i == 0:
                return wide
            return sharp if prev[i - 1] % 2 == 0 else wide

        rng = np.random.default_rng(9)
        plane = rng.integers(-30, 31, size=64, dtype=np.int64)
        stream = encode_plane(plane, provider)
        out = decode_plane(stream, provider, 64)
        np.testing.assert_array_equal(out, plane)

    @given(st.lists(st.integers(-500, 500), min_size=0, max_size=120), st.floats(-5, 5), st.floats(-6, 6))
    @settings(max_examples=120, deadline=None)
    def test_roundtrip_property(self, values, mu, ls):
        pmf = discretize_laplacian(mu, ls, -48, 48)
        plane = np.asarray(values, dtype=np.int64)
        stream = encode_plane(plane, constant_pmf(pmf))
        out = decode_plane(stream, constant_pmf(pmf), len(values))
        np.testing.assert_array_equal(out, plane)

    def test_truncated_stream_raises(self):
        pmf = discretize_laplacian(0.0, 2.0, -8, 8)
        rng = np.random.default_rng(10)
        plane = rng.integers(-8, 9, size=500, dtype=np.int64)
        stream = encode_plane(plane, constant_pmf(pmf))
        clipped = CodedStream(stream.data[: max(4, len(stream.data) // 3)], 500, 0)
        with pytest.raises(CorruptStreamError):
            decode_plane(clipped, constant_pmf(pmf), 500)

    def test_malformed_overflow_magnitude_raises(self):
        # A stream of coded zero bits drives the Exp-Golomb prefix past its cap.
        enc = RangeEncoder()
        pmf = discretize_laplacian(0.0, -6.0, -2, 2)
        cum = pmf.cum
        s = len(pmf.freq)
        enc.encode(int(cum[s]), TOTAL_FREQ)  # escape
        for _ in range(70):
            enc.encode_bit(0)
        stream = CodedStream(enc.finish(), 1, 70)
        with pytest.raises(CorruptStreamError):
            decode_plane(stream, constant_pmf(pmf), 1)


class TestRates:
    def test_all_zero_plane_at_min_scale(self):
        n = 4096
        pmf = discretize_laplacian(0.0, -6.0)
        stream = encode_plane(np.zeros(n, dtype=np.int64), constant_pmf(pmf))
        assert len(stream.data) <= n / 8 + 8

    def test_uniform_pmf_costs_eight_bits(self):
        pmf = uniform_pmf_256()
        rng = np.random.default_rng(11)
        n = 8192
        plane = rng.integers(-127, 129, size=n, dtype=np.int64)
        stream = encode_plane(plane, constant_pmf(pmf))
        bits = 8 * len(stream.data)
        assert bits <= 8.0056 * n * 1.01 + 64

    def test_single_half_probability_symbol(self):
        freq = np.array([TOTAL_FREQ // 2, TOTAL_FREQ // 2 - 1], dtype=np.int64)
        pmf = DiscretePmf(0, 1, freq, 1)
        stream = encode_plane(np.array([0]), constant_pmf(pmf))
        assert 8 * len(stream.data) <= 1 + 32

    def test_cross_entropy_uniform(self):
        pmf = uniform_pmf_256()
        plane = np.arange(-100, 100, dtype=np.int64)
        bits = plane_cross_entropy(plane, constant_pmf(pmf))
        assert bits == pytest.approx(200 * -np.log2(255 / TOTAL_FREQ))

    def test_cross_entropy_floor_symbol(self):
        freq = np.full(9, 1, dtype=np.int64)
        freq[4] = TOTAL_FREQ - 9
        pmf = DiscretePmf(-4, 4, freq, 1)
        bits = plane_cross_entropy(np.array([4]), constant_pmf(pmf))
        assert bits == pytest.approx(16.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_length_tracks_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        n = 4096
        mu = float(rng.uniform(-3, 3))
        ls = float(rng.uniform(-2, 2))
        pmf = discretize_laplacian(mu, ls, -64, 64)
        # Draw symbols from the table itself so the model matches the data.
        p = np.concatenate([pmf.freq, [pmf.overflow_freq]]) / TOTAL_FREQ
        draws = rng.choice(len(p), size=n, p=p)
        symbols = np.where(draws < len(pmf.freq), draws + pmf.support_min, pmf.support_max + 3)
        stream = encode_plane(symbols, constant_pmf(pmf))
        h = plane_cross_entropy(symbols, constant_pmf(pmf))
        assert abs(8 * len(stream.data) - h) <= 0.02 * h + 64

    def test_rate_monotone_in_scale(self):
        n = 2048
        plane = np.zeros(n, dtype=np.int64)
        lengths = []
        for ls in (-6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0):
            pmf = discretize_laplacian(0.0, ls)
            lengths.append(len(encode_plane(plane, constant_pmf(pmf)).data))
        assert all(a <= b for a, b in zip(lengths, lengths[1:]))


class TestRangeCoderCore:
    def test_bit_roundtrip(self):
        rng = np.random.default_rng(12)
        bits = rng.integers(0, 2, size=2000).tolist()
        enc = RangeEncoder()
        for b in bits:
            enc.encode_bit(b)
        dec = RangeDecoder(enc.finish())
        assert [dec.decode_bit() for _ in bits] == bits

    def test_sequence_provider(self):
        pmfs = [discretize_laplacian(float(i), 0.5, -16, 16) for i in range(10)]
        plane = np.arange(10, dtype=np.int64)
        provider = pmf_sequence(pmfs)
        stream = encode_plane(plane, provider)
        np.testing.assert_array_equal(decode_plane(stream, provider, 10), plane)
