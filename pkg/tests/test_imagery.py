import logging

import numpy as np
import pytest
from PIL import Image as PILImage

from dc4cr.imagery import (
    Image,
    ImageParseError,
    from_model_space,
    load_image,
    save_image,
    to_model_space,
)
from dc4cr.numerics import Tensor


def _rand_image(seed, h=16, w=12):
    return Image(np.random.default_rng(seed).random((h, w, 3)))


def test_ppm_all_255(tmp_path):
    p = tmp_path / "white.ppm"
    p.write_bytes(b"P6\n8 8\n255\n" + b"\xff" * (8 * 8 * 3))
    img = load_image(p)
    assert img.shape == (8, 8, 3)
    assert np.all(img.pixels == 1.0)


def test_png_roundtrip_within_quantisation(tmp_path):
    img = _rand_image(0)
    save_image(img, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert np.max(np.abs(back.pixels - img.pixels)) <= 1 / (2 * 255) + 1e-12


def test_ppm_roundtrip(tmp_path):
    img = _rand_image(1)
    save_image(img, tmp_path / "a.ppm")
    back = load_image(tmp_path / "a.ppm")
    assert np.max(np.abs(back.pixels - img.pixels)) <= 1 / (2 * 255) + 1e-12


def test_truncated_files_rejected(tmp_path):
    ppm = tmp_path / "t.ppm"
    ppm.write_bytes(b"P6\n8 8\n255\n" + b"\x00" * 20)
    with pytest.raises(ImageParseError, match="truncated"):
        load_image(ppm)
    save_image(_rand_image(2), tmp_path / "ok.png")
    raw = (tmp_path / "ok.png").read_bytes()
    bad = tmp_path / "bad.png"
    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ImageParseError):
        load_image(bad)


def test_sixteen_bit_png_rejected(tmp_path):
    arr = (np.random.default_rng(0).random((10, 10)) * 65535).astype(np.uint16)
    PILImage.fromarray(arr).save(tmp_path / "deep.png")
    with pytest.raises(ImageParseError, match="unsupported"):
        load_image(tmp_path / "deep.png")


def test_rgba_alpha_dropped(tmp_path):
    arr = np.zeros((8, 8, 4), dtype=np.uint8)
    arr[..., 0] = 255
    arr[..., 3] = 17
    PILImage.fromarray(arr, mode="RGBA").save(tmp_path / "rgba.png")
    img = load_image(tmp_path / "rgba.png")
    assert img.shape == (8, 8, 3)
    assert np.all(img.pixels[..., 0] == 1.0) and np.all(img.pixels[..., 1:] == 0.0)


@pytest.mark.parametrize("value, byte", [(0.5, 128), (0.0, 0)])
def test_save_quantisation(tmp_path, value, byte):
    save_image(Image(np.full((8, 8, 3), value)), tmp_path / "c.png")
    assert np.all(np.asarray(PILImage.open(tmp_path / "c.png")) == byte)


def test_out_of_range_clamped_with_warning(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        save_image(Image(np.full((8, 8, 3), 1.2)), tmp_path / "hot.png")
    assert np.all(np.asarray(PILImage.open(tmp_path / "hot.png")) == 255)
    assert "clamping" in caplog.text


def test_model_space_endpoints_and_clamp():
    px = np.zeros((8, 8, 3))
    px[0, 0] = 1.0
    t = to_model_space(Image(px))
    assert t.shape == (1, 3, 8, 8)
    assert t.data[0, 0, 0, 0] == 1.0 and t.data[0, 0, 1, 1] == -1.0
    hot = Tensor(np.full((1, 3, 8, 8), 3.0))
    assert np.all(from_model_space(hot).pixels == 1.0)


def test_model_space_roundtrip_exact():
    img = _rand_image(4, 32, 32)
    back = from_model_space(to_model_space(img))
    assert np.array_equal(back.pixels, img.pixels)


def test_model_space_roundtrip_on_8bit_grid():
    levels = np.arange(256) / 255.0
    px = np.broadcast_to(levels.reshape(16, 16, 1), (16, 16, 3)).copy()
    back = from_model_space(to_model_space(Image(px)))
    # a few grid levels below 0.25 lose one ulp in 2v - 1
    assert np.max(np.abs(back.pixels - px)) <= 2**-54


def test_minimum_size_enforced():
    with pytest.raises(ValueError):
        Image(np.zeros((4, 8, 3)))
