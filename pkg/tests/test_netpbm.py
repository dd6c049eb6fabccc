import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rapidseg.netpbm import FormatError, decode_netpbm, decode_rlbl, encode_netpbm, encode_rlbl


class TestDecode:
    def test_p5_2x2(self):
        arr = decode_netpbm(b"P5\n2 2\n255\n" + bytes([0, 64, 128, 255]))
        assert arr.shape == (2, 2, 1)
        assert arr.ravel().tolist() == [0, 64, 128, 255]

    def test_p6_1x1(self):
        arr = decode_netpbm(b"P6 1 1 255\n" + bytes([10, 20, 30]))
        assert arr.shape == (1, 1, 3)
        assert arr.ravel().tolist() == [10, 20, 30]

    def test_comments_in_header(self):
        arr = decode_netpbm(b"P5\n# made by hand\n1 2\n# max\n255\n" + bytes([7, 9]))
        assert arr[:, 0, 0].tolist() == [7, 9]

    def test_truncated_payload(self):
        with pytest.raises(FormatError, match="payload"):
            decode_netpbm(b"P6\n4 4\n255\n" + bytes(9))

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            decode_netpbm(b"P3\n1 1\n255\n0 0 0\n")

    def test_maxval_must_be_255(self):
        with pytest.raises(FormatError, match="maxval"):
            decode_netpbm(b"P5\n1 1\n65535\n" + bytes(2))


class TestRoundTrip:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]))))
    def test_netpbm(self, arr):
        assert np.array_equal(decode_netpbm(encode_netpbm(arr)), arr)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.int32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 99)))
    def test_rlbl(self, labels):
        out, m = decode_rlbl(encode_rlbl(labels, 100))
        assert m == 100
        assert np.array_equal(out, labels)

    def test_rlbl_header_layout(self):
        raw = encode_rlbl(np.array([[1, 2, 3]]), 4)
        assert raw[:4] == b"RLBL"
        assert np.frombuffer(raw[4:16], "<u4").tolist() == [3, 1, 4]
        assert len(raw) == 16 + 3 * 4
