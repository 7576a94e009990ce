"""Compressor tests: exact wire bytes, round trips, unbiasedness."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedroad.compress import (
    DEFAULT_LEVELS,
    Int8Tensor,
    QsgdPayload,
    deserialize,
    int8_dequantize,
    int8_quantize,
    payload_bytes,
    qsgd_dequantize,
    qsgd_quantize,
    serialize,
)
from fedroad.errors import DomainError, FormatError, InputError
from fedroad.numcore import RngStream, Tensor


# ---------------------------------------------------------------------------
# QSGD
# ---------------------------------------------------------------------------


class TestQsgd:
    def test_zero_vector(self):
        p = qsgd_quantize(Tensor.from_array([0.0, 0.0]), 4, RngStream(1))
        assert p.l2_norm == 0.0
        assert np.array_equal(qsgd_dequantize(p).data, [0.0, 0.0])

    def test_enumerated_probabilities_and_mean(self):
        # v = [3, 4], s = 1: r = [0.6, 0.8]; level_0 is Bernoulli(0.6) and the
        # dequantized first element is 5 * level_0, so its mean is 3.
        trials = 10**5
        rng = RngStream(12)
        ones = 0
        acc = 0.0
        for _ in range(trials):
            p = qsgd_quantize(Tensor.from_array([3.0, 4.0]), 1, rng)
            ones += int(p.levels[0])
            acc += qsgd_dequantize(p).data[0]
        assert ones / trials == pytest.approx(0.6, abs=4 * np.sqrt(0.24 / trials))
        assert acc / trials == pytest.approx(3.0, abs=0.05)

    def test_high_resolution_limit(self):
        rng = RngStream(13)
        v = Tensor.from_array(rng.normal_array(50))
        back = qsgd_dequantize(qsgd_quantize(v, 2**20, rng))
        rel = np.linalg.norm(back.data - v.data) / np.linalg.norm(v.data)
        assert rel < 1e-4

    def test_rejects_bad_level_count(self):
        with pytest.raises(DomainError):
            qsgd_quantize(Tensor.from_array([1.0]), 0, RngStream(0))

    def test_saturated_payload(self):
        s = 7
        p = QsgdPayload((3,), s, 2.0, np.zeros(3, bool), np.full(3, s, np.uint32))
        assert np.allclose(qsgd_dequantize(p).data, 2.0)

    def test_corrupt_levels_rejected(self):
        p = QsgdPayload((2,), 4, 1.0, np.zeros(2, bool), np.array([1, 2], np.uint32))
        bad = QsgdPayload.__new__(QsgdPayload)
        object.__setattr__(bad, "shape", p.shape)
        object.__setattr__(bad, "s", p.s)
        object.__setattr__(bad, "l2_norm", p.l2_norm)
        object.__setattr__(bad, "signs", p.signs)
        object.__setattr__(bad, "levels", np.array([5, 0], np.uint32))
        with pytest.raises(FormatError):
            qsgd_dequantize(bad)

    def test_norm_bound_property(self):
        rng = RngStream(14)
        for _ in range(20):
            d = 1 + rng.randint(16)
            v = Tensor.from_array(rng.normal_array(d) * 3.0)
            back = qsgd_dequantize(qsgd_quantize(v, 127, rng))
            assert np.linalg.norm(back.data) <= np.linalg.norm(v.data) * np.sqrt(d) + 1e-9

    def test_unbiasedness_per_coordinate(self):
        v = np.array([0.3, -1.7, 0.04, 2.5])
        n = 20_000
        rng = RngStream(15)
        acc = np.zeros(4)
        acc2 = np.zeros(4)
        for _ in range(n):
            back = qsgd_dequantize(qsgd_quantize(Tensor.from_array(v), 3, rng)).data
            acc += back
            acc2 += back * back
        mean = acc / n
        std = np.sqrt(np.maximum(acc2 / n - mean**2, 0.0))
        assert np.all(np.abs(mean - v) <= 4 * std / np.sqrt(n) + 1e-12)


# ---------------------------------------------------------------------------
# int8
# ---------------------------------------------------------------------------


class TestInt8:
    def test_constant_tensor_exact(self):
        t = Tensor.from_array([2.5, 2.5, 2.5])
        q = int8_quantize(t)
        assert q.scale == 0.0
        assert np.array_equal(int8_dequantize(q).data, np.float32(2.5) * np.ones(3))

    def test_forced_codes(self):
        q = int8_quantize(Tensor.from_array([0.0, 2.55]))
        assert q.codes.tolist() == [0, 255]
        assert q.scale == pytest.approx(0.01, rel=1e-6)

    def test_roundtrip_error_bound(self):
        rng = RngStream(16)
        for _ in range(50):
            d = 2 + rng.randint(40)
            t = Tensor.from_array(rng.normal_array(d) * (1.0 + 10.0 * rng.uniform01()))
            q = int8_quantize(t)
            back = int8_dequantize(q)
            bound = (t.data.max() - t.data.min()) / 510.0 + 1e-7
            assert np.max(np.abs(back.data - t.data)) <= bound

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=32))
    @settings(max_examples=80, deadline=None)
    def test_roundtrip_bound_hypothesis(self, vals):
        t = Tensor.from_array(vals)
        back = int8_dequantize(int8_quantize(t))
        bound = (t.data.max() - t.data.min()) / 510.0 + 1e-7
        # float32 rounding of min adds at most 2^-24 relative slack
        bound += np.abs(t.data.min()) * 2.0**-23
        assert np.max(np.abs(back.data - t.data)) <= bound

    def test_rejects_nan(self):
        bad = Tensor((2,), np.array([np.nan, 1.0]), _check=False)
        with pytest.raises(InputError):
            int8_quantize(bad)


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------


class TestWireFormat:
    def test_qsgd_golden_bytes(self):
        # Hand-assembled per the documented layout: 3 signs LSB-first in one
        # byte, 2-bit levels LSB-first in one byte.
        p = QsgdPayload(
            (3,),
            3,
            1.5,
            np.array([True, False, True]),
            np.array([3, 0, 2], np.uint32),
        )
        expected = (
            b"FRQ1"
            + bytes([1, 1])
            + struct.pack("<I", 3)
            + struct.pack("<If", 3, 1.5)
            + bytes([0b101])
            + bytes([0b100011])
        )
        assert serialize(p) == expected
        assert payload_bytes(p) == len(expected)

    def test_int8_golden_bytes(self):
        q = Int8Tensor((2, 2), -1.0, 0.5, np.array([0, 1, 128, 255], np.uint8))
        expected = (
            b"FRI1"
            + bytes([2, 2])
            + struct.pack("<II", 2, 2)
            + struct.pack("<ff", -1.0, 0.5)
            + bytes([0, 1, 128, 255])
        )
        assert serialize(q) == expected
        assert payload_bytes(q) == len(expected)

    def test_raw_golden_bytes(self):
        t = Tensor.from_array([1.0, -2.0])
        expected = b"FRT1" + bytes([3, 1]) + struct.pack("<I", 2) + struct.pack("<ff", 1.0, -2.0)
        assert serialize(t) == expected
        assert payload_bytes(t) == len(expected)

    def test_bijective_roundtrips(self):
        rng = RngStream(17)
        p = qsgd_quantize(Tensor.from_array(rng.normal_array(37)), 127, rng)
        q = int8_quantize(Tensor.from_array(rng.normal_array(21).reshape(7, 3)))
        t = Tensor.from_array(np.float32(rng.normal_array(9)).astype(np.float64))
        for obj in (p, q, t):
            blob = serialize(obj)
            again = serialize(deserialize(blob))
            assert blob == again
        back = deserialize(serialize(p))
        assert isinstance(back, QsgdPayload)
        assert back.l2_norm == p.l2_norm
        assert np.array_equal(back.levels, p.levels)
        assert np.array_equal(back.signs, p.signs)

    def test_sizes_match_serialization(self):
        rng = RngStream(18)
        v = Tensor.from_array(rng.normal_array(1000))
        p = qsgd_quantize(v, 127, rng)
        q = int8_quantize(v)
        assert payload_bytes(q) == len(serialize(q)) == 1000 + 8 + 10
        assert payload_bytes(p) == len(serialize(p)) == 125 + 875 + 8 + 10
        assert payload_bytes(v) == len(serialize(v)) == 4000 + 10

    def test_empty_tensor_header_only(self):
        t = Tensor((0,), np.zeros(0))
        assert payload_bytes(t) == len(serialize(t)) == 10

    def test_compression_ratio(self):
        for d in (1000, 1024, 5000):
            v = Tensor.from_array(RngStream(d).normal_array(d))
            p = qsgd_quantize(v, DEFAULT_LEVELS, RngStream(d, 1))
            assert payload_bytes(p) < 0.26 * payload_bytes(v)

    def test_truncated_rejected(self):
        blob = serialize(Tensor.from_array([1.0, 2.0, 3.0]))
        with pytest.raises(FormatError):
            deserialize(blob[:-1])
        with pytest.raises(FormatError):
            deserialize(b"XXXX" + blob[4:])
