import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from jdcodec.imaging import (
    CropSpec,
    ImageF32,
    ImageIOError,
    OutOfBounds,
    UnsupportedBitDepth,
    UnsupportedChannels,
    extract_crop,
    load_image,
    pad_to_multiple,
    save_image,
    to_batch,
    unpad,
)


def ramp(h, w, c=3):
    return ImageF32(np.arange(c * h * w, dtype=np.float64).reshape(c, h, w) / (c * h * w))


def write_ppm(path, w, h, payload, maxval=255):
    path.write_bytes(f"P6\n{w} {h}\n{maxval}\n".encode() + bytes(payload))


def test_ppm_max_value_normalizes_to_one(tmp_path):
    write_ppm(tmp_path / "a.ppm", 2, 2, [255] * 12)
    img = load_image(tmp_path / "a.ppm")
    assert img.dims == (2, 2) and img.channels == 3
    assert np.all(img.data == 1.0)


def test_ppm_samples_divide_by_255(tmp_path):
    write_ppm(tmp_path / "a.ppm", 1, 1, [0, 128, 255])
    img = load_image(tmp_path / "a.ppm")
    np.testing.assert_allclose(img.data[:, 0, 0], [0.0, 128 / 255, 1.0], atol=1e-7)


def test_ppm_header_comments_and_16bit(tmp_path):
    body = np.array([0, 65535, 32768], dtype=">u2").tobytes()
    (tmp_path / "b.ppm").write_bytes(b"P6\n# made by hand\n1 1\n65535\n" + body)
    img = load_image(tmp_path / "b.ppm")
    np.testing.assert_allclose(img.data[:, 0, 0], [0.0, 1.0, 32768 / 65535], atol=1e-7)


def test_grayscale_png_is_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8), "L").save(tmp_path / "g.png")
    with pytest.raises(UnsupportedChannels):
        load_image(tmp_path / "g.png")


def test_malformed_files_raise_typed_errors(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ImageIOError):
        load_image(tmp_path / "x.ppm")
    write_ppm(tmp_path / "short.ppm", 2, 2, [1, 2, 3])
    with pytest.raises(ImageIOError):
        load_image(tmp_path / "short.ppm")
    with pytest.raises(ImageIOError):
        load_image(tmp_path / "missing.ppm")


def test_zero_image_round_trips(tmp_path):
    img = ImageF32(np.zeros((3, 4, 4)))
    save_image(img, tmp_path / "z.ppm")
    assert load_image(tmp_path / "z.ppm") == img


@pytest.mark.parametrize("suffix,bits,bound", [(".ppm", 8, 0.5 / 255), (".ppm", 16, 0.5 / 65535), (".png", 8, 0.5 / 255)])
def test_round_trip_error_bound(tmp_path, suffix, bits, bound):
    img = ImageF32(np.random.default_rng(3).random((3, 7, 5)))
    path = tmp_path / f"r{suffix}"
    save_image(img, path, bits=bits)
    back = load_image(path)
    assert np.max(np.abs(back.data.astype(np.float64) - img.data)) <= bound + 1e-7


def test_save_errors(tmp_path):
    img = ImageF32(np.zeros((3, 2, 2)))
    with pytest.raises(ImageIOError):
        save_image(img, tmp_path / "nope" / "a.ppm")
    with pytest.raises(UnsupportedBitDepth):
        save_image(img, tmp_path / "a.ppm", bits=12)


def test_image_invariants():
    with pytest.raises(ValueError):
        ImageF32(np.full((3, 2, 2), 1.5))
    with pytest.raises(ValueError):
        ImageF32(np.zeros((2, 2)))
    assert ImageF32.from_array(np.full((3, 1, 1), 2.0)).data.max() == 1.0


def test_full_crop_is_identity():
    img = ramp(4, 4)
    assert extract_crop(img, CropSpec(0, 0, 4)) == img


def test_crop_reads_from_ramp():
    img = ramp(4, 4)
    crop = extract_crop(img, CropSpec(1, 1, 2))
    np.testing.assert_array_equal(crop.data, img.data[:, 1:3, 1:3])


def test_crop_out_of_bounds():
    with pytest.raises(OutOfBounds):
        extract_crop(ramp(4, 4), CropSpec(3, 0, 2))


@settings(max_examples=40, deadline=None)
@given(x0=st.integers(0, 6), y0=st.integers(0, 6), s1=st.integers(4, 10), x1=st.integers(0, 3), y1=st.integers(0, 3), s2=st.integers(1, 4))
def test_crops_compose(x0, y0, s1, x1, y1, s2):
    img = ramp(16, 16)
    if x1 + s2 > s1 or y1 + s2 > s1:
        return
    nested = extract_crop(extract_crop(img, CropSpec(x0, y0, s1)), CropSpec(x1, y1, s2))
    assert nested == extract_crop(img, CropSpec(x0 + x1, y0 + y1, s2))


def test_pad_examples():
    img = ramp(32, 32)
    out, dims = pad_to_multiple(img, 16)
    assert out == img and dims == (32, 32)

    img = ramp(30, 30)
    out, dims = pad_to_multiple(img, 16)
    assert out.dims == (32, 32) and dims == (30, 30)
    np.testing.assert_array_equal(out.data[:, 30, :30], img.data[:, 29, :])
    np.testing.assert_array_equal(out.data[:, :30, 31], img.data[:, :, 29])

    one = ImageF32(np.array([0.2, 0.4, 0.6]).reshape(3, 1, 1))
    out, _ = pad_to_multiple(one, 16)
    assert out.dims == (16, 16)
    np.testing.assert_allclose(out.data, np.broadcast_to(one.data, (3, 16, 16)))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), m=st.integers(1, 17))
def test_pad_then_unpad_is_identity(h, w, m):
    img = ramp(h, w)
    out, dims = pad_to_multiple(img, m)
    assert out.height % m == 0 and out.width % m == 0
    assert out.height - h < m and out.width - w < m
    assert unpad(out, dims) == img


def test_to_batch_stacks():
    a, b = ramp(4, 4), ImageF32(np.zeros((3, 4, 4)))
    batch = to_batch(a, b)
    assert batch.shape == (2, 3, 4, 4) and batch.dtype == np.float64
