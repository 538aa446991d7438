import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from petra.runtime import Backward, EndOfStream, Forward, decode, encode
from petra.runtime.messages import WireError

floats = st.sampled_from([np.float32, np.float64])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**40), floats.flatmap(lambda dt: arrays(dt, array_shapes(max_dims=4, max_side=4))),
       st.booleans())
def test_forward_round_trip(mb, x, with_labels):
    labels = np.arange(3, dtype=np.int64) if with_labels else None
    back = decode(encode(Forward(mb, x, labels)))
    assert isinstance(back, Forward) and back.mb == mb
    assert back.x.dtype == x.dtype
    np.testing.assert_array_equal(back.x, x)
    if with_labels:
        np.testing.assert_array_equal(back.labels, labels)
    else:
        assert back.labels is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), arrays(np.float64, (2, 3)), arrays(np.float64, (2, 3)))
def test_backward_round_trip(mb, x, d):
    back = decode(encode(Backward(mb, x, d)))
    assert isinstance(back, Backward) and back.mb == mb
    np.testing.assert_array_equal(back.x, x)
    np.testing.assert_array_equal(back.delta, d)


def test_end_of_stream_round_trip():
    assert isinstance(decode(encode(EndOfStream(5))), EndOfStream)


def test_malformed_messages_rejected():
    buf = encode(Backward(1, np.zeros((2, 2)), np.ones((2, 2))))
    with pytest.raises(WireError):
        decode(buf[:-3])
    with pytest.raises(WireError):
        decode(buf + b"\x00")
    with pytest.raises(WireError):
        encode(Forward(0, np.zeros(2, dtype=np.complex64)))
