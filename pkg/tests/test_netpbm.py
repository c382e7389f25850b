import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from styledit import netpbm


def test_value_mapping_endpoints():
    np.testing.assert_array_equal(netpbm.to_bytes(np.array([-1.0, 0.0, 1.0])), [0, 128, 255])
    np.testing.assert_array_equal(netpbm.to_bytes(np.array([-3.0, 3.0])), [0, 255])


def test_ppm_header_and_size():
    img = np.zeros((2, 3, 3))
    data = netpbm.encode_ppm(img)
    assert data.startswith(b"P6\n3 2\n255\n")
    assert len(data) == len(b"P6\n3 2\n255\n") + 18


def test_decode_with_comment():
    data = b"P5\n# a comment\n2 1\n255\n\x00\xff"
    np.testing.assert_array_equal(netpbm.decode(data), [[0, 255]])


@pytest.mark.parametrize(
    "data",
    [b"P3\n1 1\n255\n000", b"P6\n2 2\n255\n\x00\x00", b"P6\n2", b"P6\n2 2\n65535\n" + bytes(24), b"P6\nx 2\n255\n"],
)
def test_decode_rejects_bad_input(data):
    with pytest.raises(netpbm.NetpbmError):
        netpbm.decode(data)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6).map(lambda s: (s[0], s[1], 3))))
def test_byte_round_trip_is_exact(raw):
    img = netpbm.from_bytes(raw)
    assert np.array_equal(netpbm.decode(netpbm.encode_ppm(img)), raw)


def test_pgm_round_trip(tmp_path):
    mask = np.array([[0.0, 1.0], [1.0, 0.0]])
    netpbm.write_pgm(tmp_path / "m.pgm", mask)
    assert np.array_equal(netpbm.read_pgm(tmp_path / "m.pgm"), mask)
    with pytest.raises(netpbm.NetpbmError):
        netpbm.read_ppm(tmp_path / "m.pgm")
