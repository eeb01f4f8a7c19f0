import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pgnseg.tensor import DimensionError, NpyFormatError, conv2d, parse_npy, read_npy, unfold, write_npy


def conv2d_loops(x, k, bias):
    """Direct quadruple loop, zero outside the image."""
    c_out, c_in, kk, _ = k.shape
    s = (kk - 1) // 2
    _, h, w = x.shape
    out = np.zeros((c_out, h, w))
    for d in range(c_out):
        for a in range(h):
            for b in range(w):
                acc = bias[d]
                for j in range(c_in):
                    for p in range(-s, s + 1):
                        for q in range(-s, s + 1):
                            if 0 <= a + p < h and 0 <= b + q < w:
                                acc += k[d, j, p + s, q + s] * x[j, a + p, b + q]
                out[d, a, b] = acc
    return out


class TestConv2d:
    def test_scalar(self):
        out = conv2d(np.array([[[2.0]]]), np.array([[[[3.0]]]]), np.array([1.0]), 0)
        assert out.tolist() == [[[7.0]]]

    def test_ones_window_counts(self):
        out = conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1)
        assert out[0, 1, 1] == 9.0
        assert out[0, 0, 0] == out[0, 0, 2] == out[0, 2, 0] == out[0, 2, 2] == 4.0
        assert out[0, 0, 1] == 6.0

    def test_identity_filter(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5, 4))
        k = np.zeros((3, 3, 3, 3))
        k[np.arange(3), np.arange(3), 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(x, k, np.zeros(3), 1), x)

    def test_matches_loops(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 6))
        k = rng.normal(size=(3, 2, 5, 5))
        b = rng.normal(size=3)
        np.testing.assert_allclose(conv2d(x, k, b, 2), conv2d_loops(x, k, b), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(np.zeros((2, 3, 3)), np.zeros((1, 3, 1, 1)), np.zeros(1), 0)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            conv2d(np.zeros((1, 3, 3)), np.zeros((1, 1, 2, 2)), np.zeros(1))

    def test_f32_stays_f32(self):
        out = conv2d(np.ones((1, 2, 2), np.float32), np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
        assert out.dtype == np.float32

    @settings(max_examples=30, deadline=None)
    @given(
        x=arrays(np.float64, (2, 4, 4), elements=st.floats(-10, 10)),
        y=arrays(np.float64, (2, 4, 4), elements=st.floats(-10, 10)),
        alpha=st.floats(-3, 3),
        beta=st.floats(-3, 3),
    )
    def test_linearity(self, x, y, alpha, beta):
        k = np.random.default_rng(2).normal(size=(3, 2, 3, 3))
        zero = np.zeros(3)
        lhs = conv2d(alpha * x + beta * y, k, zero, 1)
        rhs = alpha * conv2d(x, k, zero, 1) + beta * conv2d(y, k, zero, 1)
        scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1.0)
        assert np.abs(lhs - rhs).max() <= 1e-6 * scale

    @settings(max_examples=30, deadline=None)
    @given(x=arrays(np.float64, (3, 4, 5), elements=st.floats(-10, 10)))
    def test_identity_1x1_property(self, x):
        k = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(conv2d(x, k, np.zeros(3), 0), x)


class TestUnfold:
    def test_k1_identity(self):
        x = np.arange(12.0).reshape(3, 2, 2)
        np.testing.assert_array_equal(unfold(x, 1), x)

    def test_corner_patch(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        assert unfold(x, 3)[:, 0, 0].tolist() == [0, 0, 0, 0, 1, 2, 0, 3, 4]

    def test_zero_input(self):
        assert not unfold(np.zeros((2, 3, 3)), 3).any()

    def test_index_layout(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 4))
        u = unfold(x, 3)
        for c in range(2):
            for p in (-1, 0, 1):
                for q in (-1, 0, 1):
                    row = u[c * 9 + (p + 1) * 3 + (q + 1)]
                    assert row[2, 1] == x[c, 2 + p, 1 + q]

    @settings(max_examples=25, deadline=None)
    @given(x=arrays(np.float64, (2, 5, 5), elements=st.floats(-5, 5)))
    def test_unfold_dot_equals_conv(self, x):
        k = np.random.default_rng(4).normal(size=(3, 2, 3, 3))
        via_unfold = np.einsum("dk,kab->dab", k.reshape(3, -1), unfold(x, 3))
        direct = conv2d(x, k, np.zeros(3), 1)
        scale = max(np.abs(direct).max(), 1.0)
        assert np.abs(via_unfold - direct).max() <= 1e-6 * scale

    def test_wrong_padding(self):
        with pytest.raises(DimensionError):
            unfold(np.zeros((1, 3, 3)), 3, padding=0)


class TestNpy:
    def test_roundtrip_bytes(self, tmp_path):
        t = np.arange(6, dtype=np.float32).reshape(2, 3) / 7
        write_npy(t, tmp_path / "a.npy")
        back = read_npy(tmp_path / "a.npy")
        assert back.shape == (2, 3) and back.dtype == np.float32
        assert back.tobytes() == t.tobytes()

    def test_header_alignment_and_numpy_compat(self, tmp_path):
        t = np.linspace(0, 1, 24).reshape(2, 3, 4)
        write_npy(t, tmp_path / "b.npy")
        raw = (tmp_path / "b.npy").read_bytes()
        assert raw[:8] == b"\x93NUMPY\x01\x00"
        (hlen,) = struct.unpack("<H", raw[8:10])
        assert (10 + hlen) % 64 == 0 and raw[9 + hlen : 10 + hlen] == b"\n"
        np.testing.assert_array_equal(np.load(tmp_path / "b.npy"), t)
        buf = io.BytesIO()
        np.save(buf, t)
        np.testing.assert_array_equal(parse_npy(buf.getvalue()), t)

    def _file(self, descr="<f4", fortran=False, shape=(2, 3), payload=24):
        header = "{'descr': '%s', 'fortran_order': %s, 'shape': %r, }" % (descr, fortran, shape)
        header += " " * (-(11 + len(header)) % 64) + "\n"
        return b"\x93NUMPY\x01\x00" + struct.pack("<H", len(header)) + header.encode() + b"\0" * payload

    def test_fortran_rejected(self):
        with pytest.raises(NpyFormatError):
            parse_npy(self._file(fortran=True))

    def test_truncated_payload(self):
        with pytest.raises(NpyFormatError) as err:
            parse_npy(self._file(payload=20))
        assert "24" in str(err.value) and err.value.offset > 0

    def test_bad_magic(self):
        with pytest.raises(NpyFormatError) as err:
            parse_npy(b"\x93NUMPX\x01\x00" + b"\0" * 100)
        assert err.value.offset == 0

    def test_big_endian_rejected(self):
        with pytest.raises(NpyFormatError):
            parse_npy(self._file(descr=">f4"))

    def test_object_rejected(self):
        with pytest.raises(NpyFormatError):
            parse_npy(self._file(descr="|O"))

    @settings(max_examples=30, deadline=None)
    @given(arr=arrays(st.sampled_from([np.float32, np.float64]), st.tuples(st.integers(1, 4), st.integers(1, 4))))
    def test_roundtrip_property(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("npy") / "x.npy"
        write_npy(arr, path)
        assert read_npy(path).tobytes() == arr.tobytes()
