import numpy as np
import pytest

from ..errors import ImageFormatError
from ..pgm import dequantize, dump_images, from_bytes, load_image, quantize, read_pgm, to_bytes, write_pgm


def test_quantize_endpoints():
    """Test -1, 0 and 1 map to 0, 128 and 255, and values outside clip."""
    assert list(quantize(np.array([-1.0, 0.0, 1.0, -3.0, 2.0]))) == [0, 128, 255, 0, 255]
    assert dequantize(np.array([0, 255], dtype=np.uint8)).tolist() == [-1.0, 1.0]


def test_header_layout():
    """Test the exact P5 header for a 3-wide, 2-high image."""
    buf = to_bytes(np.zeros((1, 2, 3)))
    assert buf.startswith(b"P5\n3 2\n255\n")
    assert len(buf) == len(b"P5\n3 2\n255\n") + 6


def test_round_trip_within_one_level(tmp_path, rng):
    """Test write then read stays within 1/255 of the original."""
    image = rng.uniform(-1, 1, (1, 8, 5))
    path = str(tmp_path / "nested" / "img.pgm")
    write_pgm(path, image)
    back = load_image(path)
    assert back.shape == (1, 8, 5)
    assert np.max(np.abs(back - image)) <= 1.0 / 255 + 1e-12
    assert read_pgm(path).dtype == np.uint8


def test_header_comments_and_whitespace():
    """Test comments and irregular whitespace in the header are skipped."""
    raster = bytes([0, 128, 255, 64])
    buf = b"P5 # magic\n# a comment line\n2\t2\n  255\n" + raster
    assert from_bytes(buf).tolist() == [[0, 128], [255, 64]]


@pytest.mark.parametrize("buf", [
    b"P2\n2 2\n255\n" + bytes(4),
    b"P5\n2 2\n65535\n" + bytes(8),
    b"P5\n2 2\n255\n" + bytes(3),
    b"P5\nx 2\n255\n" + bytes(4),
    b"P5\n2",
])
def test_bad_graymaps(buf):
    """Test wrong magic, maxval, short rasters and broken headers."""
    with pytest.raises(ImageFormatError):
        from_bytes(buf)


def test_rejects_multichannel():
    """Test only single-channel images are written."""
    with pytest.raises(ImageFormatError):
        to_bytes(np.zeros((3, 4, 4)))


def test_dump_images_names(tmp_path):
    """Test dumped files are named by prefix and zero-padded id."""
    paths = dump_images(str(tmp_path), "edit", [np.zeros((1, 4, 4))] * 2, ids=[3, 12])
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["edit_0003.pgm", "edit_0012.pgm"]
