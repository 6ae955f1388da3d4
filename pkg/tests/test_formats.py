import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qres import checkpoint
from qres.container import HEADER_BYTES, MODE_LOSSLESS, CodedImage, container_read, container_write
from qres.errors import FormatError
from qres.imageio import read_image, read_ppm_bytes, to_float, to_uint8, write_image, write_ppm_bytes


# -- container ---------------------------------------------------------------------

def sample_image():
    return CodedImage(width=17, height=5, model_id=200, lambda_code=3, streams=[b"abc", b"", b"\x00" * 9])


def test_container_layout():
    data = sample_image().to_bytes()
    assert data[:4] == b"QRES"
    magic, ver, mode, w, h, mid, lam, count = struct.unpack_from("<4sBBIIBBB", data)
    assert (ver, mode, w, h, mid, lam, count) == (1, 0, 17, 5, 200, 3, 3)
    assert len(data) == HEADER_BYTES + 3 * 4 + 3 + 0 + 9
    assert sample_image().total_bits() == 8 * len(data)


def test_container_round_trip():
    img = sample_image()
    assert container_read(container_write(img)) == img
    lossless = CodedImage(1, 1, 0, mode=MODE_LOSSLESS, streams=[b"x"])
    assert CodedImage.from_bytes(lossless.to_bytes()) == lossless


@pytest.mark.parametrize("mutate", [
    lambda d: b"QREX" + d[4:],
    lambda d: d[:4] + b"\x02" + d[5:],
    lambda d: d[:5] + b"\x07" + d[6:],
    lambda d: d[:-1],
    lambda d: d + b"\0",
    lambda d: d[:10],
])
def test_container_rejects_malformed(mutate):
    with pytest.raises(FormatError):
        container_read(mutate(sample_image().to_bytes()))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.binary(max_size=40), max_size=8), st.integers(1, 2 ** 32 - 1), st.integers(1, 2 ** 32 - 1))
def test_container_round_trip_property(streams, w, h):
    img = CodedImage(w, h, 7, streams=streams)
    assert container_read(img.to_bytes()) == img


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_container_fuzz_never_crashes(data):
    try:
        container_read(b"QRES\x01" + data)
    except FormatError:
        pass


# -- checkpoint --------------------------------------------------------------------

def test_checkpoint_round_trip_and_order(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"b.w": rng.normal(size=(2, 3)), "a": rng.normal(size=()), "c": rng.normal(size=(4,))}
    data = checkpoint.dumps(tensors)
    assert data[:5] == b"QRWT\x01"
    # first record is "a" with rank 0
    assert data[5:7] == struct.pack("<H", 1) and data[7:8] == b"a" and data[8] == 0
    back = checkpoint.loads(data)
    assert list(back) == ["a", "b.w", "c"]
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
    path = tmp_path / "m.qrwt"
    checkpoint.save(path, tensors)
    assert path.read_bytes() == data
    assert checkpoint.dumps(checkpoint.load(path)) == data


@pytest.mark.parametrize("data", [b"QRWX\x01", b"QRWT\x09", b"QRWT\x01\x05\x00ab", b"QRWT"])
def test_checkpoint_rejects_malformed(data):
    with pytest.raises(FormatError):
        checkpoint.loads(data)


def test_checkpoint_truncated_payload():
    data = checkpoint.dumps({"x": np.ones(10)})
    with pytest.raises(FormatError):
        checkpoint.loads(data[:-3])


# -- images ------------------------------------------------------------------------

def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    data = write_ppm_bytes(img)
    assert data.startswith(b"P6\n5 7\n255\n")
    assert np.array_equal(read_ppm_bytes(data), img)
    write_image(tmp_path / "a.ppm", img)
    assert np.array_equal(read_image(tmp_path / "a.ppm"), img)


def test_ppm_header_comments():
    img = np.zeros((1, 2, 3), dtype=np.uint8)
    data = b"P6 # comment\n2 1\n# another\n255\n" + img.tobytes()
    assert np.array_equal(read_ppm_bytes(data), img)


@pytest.mark.parametrize("data", [b"P5\n1 1\n255\n\0", b"P6\n1 1\n65535\n\0\0\0", b"P6\n2 2\n255\n\0\0\0"])
def test_ppm_rejects(data):
    with pytest.raises(FormatError):
        read_ppm_bytes(data)


def test_png_round_trip(tmp_path):
    pytest.importorskip("PIL")
    img = np.random.default_rng(1).integers(0, 256, (4, 6, 3), dtype=np.uint8)
    write_image(tmp_path / "a.png", img)
    assert np.array_equal(read_image(tmp_path / "a.png"), img)


def test_to_uint8_rounds_half_to_even_and_clamps():
    x = np.array([0.5, 1.5, 2.5, -3.0, 300.0]) / 255.0
    out = to_uint8(x.reshape(1, 1, 1, 5))
    np.testing.assert_array_equal(out.ravel(), [0, 2, 2, 0, 255])


def test_float_conversion_is_exact_inverse():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    assert np.array_equal(to_uint8(to_float(img)), img)
