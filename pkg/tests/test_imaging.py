import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from veinmatch.errors import DimensionError, IngestionError, ParameterError
from veinmatch.imaging import (DEFAULT_LOG_SCALE, EnhanceMethod, GrayImage, Perturbation, crop_roi,
                               decode_pgm, encode_pgm, enhance, gaussian_kernel, perturb, read_image,
                               rotate_array, to_tensor, write_pgm)

images = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def img_of(values):
    return GrayImage(np.asarray(values, dtype=np.uint8))


class TestGrayImage:
    def test_from_list_roundtrip(self):
        img = GrayImage.from_list(3, 2, [1, 2, 3, 4, 5, 6])
        assert (img.width, img.height) == (3, 2)
        assert img.to_list() == [1, 2, 3, 4, 5, 6]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            GrayImage.from_list(2, 2, [0, 1, 2])

    @pytest.mark.parametrize("bad", [[-1], [256], [1.5]])
    def test_intensity_range(self, bad):
        with pytest.raises(ParameterError):
            GrayImage(np.array([bad], dtype=np.float64))

    def test_pixels_are_read_only(self):
        img = img_of([[1, 2]])
        with pytest.raises(ValueError):
            img.pixels[0, 0] = 9


class TestCrop:
    def test_full_frame(self):
        img = img_of(np.arange(16).reshape(4, 4))
        assert crop_roi(img, 2, 2, 4) == img

    def test_single_pixel(self):
        img = GrayImage.from_list(3, 3, list(range(1, 10)))
        assert crop_roi(img, 1, 1, 1).to_list() == [5]

    def test_full_size_roi(self, rng):
        img = GrayImage(rng.integers(0, 256, size=(300, 300)))
        roi = crop_roi(img, 150, 150, 224)
        assert (roi.width, roi.height) == (224, 224)

    def test_clamps_inward(self):
        img = img_of(np.arange(25).reshape(5, 5))
        out = crop_roi(img, 0, 0, 3)
        assert out == img_of(np.arange(25).reshape(5, 5)[:3, :3])
        out = crop_roi(img, 4, 4, 3)
        assert out == img_of(np.arange(25).reshape(5, 5)[2:, 2:])

    def test_too_large(self):
        with pytest.raises(DimensionError):
            crop_roi(img_of(np.zeros((4, 6))), 2, 2, 5)


def hist_eq_oracle(px):
    # direct per-pixel CDF remap, written independently of the LUT code
    n = px.size
    flat = px.ravel()
    out = []
    for v in flat:
        cdf = np.count_nonzero(flat <= v) / n
        out.append(math.floor(cdf * 255 + 0.5))
    return np.array(out, dtype=np.uint8).reshape(px.shape)


class TestEnhance:
    def test_log_zero(self):
        assert enhance(img_of([[0]]), EnhanceMethod("log", log_scale=1.0)).to_list() == [0]

    def test_log_default_full_range(self):
        assert math.isclose(DEFAULT_LOG_SCALE * math.log(256), 255.0)
        assert enhance(img_of([[255]]), EnhanceMethod("log")).to_list() == [255]

    def test_hist_constant_maps_to_255(self):
        out = enhance(img_of(np.full((4, 5), 77)), EnhanceMethod("hist"))
        assert set(out.to_list()) == {255}

    @given(images)
    def test_hist_matches_oracle(self, px):
        assert np.array_equal(enhance(GrayImage(px), EnhanceMethod("hist")).pixels, hist_eq_oracle(px))

    @given(images)
    def test_hist_idempotent(self, px):
        once = enhance(GrayImage(px), EnhanceMethod("hist"))
        assert enhance(once, EnhanceMethod("hist")) == once

    def test_laplacian_constant_is_identity(self):
        img = img_of(np.full((5, 5), 90))
        assert enhance(img, EnhanceMethod("laplacian")) == img

    def test_laplacian_single_spike(self):
        px = np.full((3, 3), 10)
        px[1, 1] = 20
        out = enhance(img_of(px), EnhanceMethod("laplacian")).pixels
        # centre: 20 + (80 - 40) = 60; edge neighbours: 10 + (40 - 50) = 0
        assert out[1, 1] == 60
        assert out[0, 1] == 0 and out[0, 0] == 10

    def test_clahe_single_tile_unclipped_equals_hist(self, rng):
        # with one tile and a clip limit above any bin count CLAHE is plain equalisation
        px = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        ref = enhance(GrayImage(px), EnhanceMethod("hist")).pixels.astype(int)
        out = enhance(GrayImage(px), EnhanceMethod("clahe", clip_limit=1000.0, tiles=(1, 1))).pixels
        assert np.abs(out.astype(int) - ref).max() <= 1

    def test_clahe_reduces_to_hist_sign(self, rng):
        px = rng.integers(60, 120, size=(32, 32)).astype(np.uint8)
        out = enhance(GrayImage(px), EnhanceMethod("clahe"))
        assert out.pixels.std() > px.std()

    @pytest.mark.parametrize("kwargs", [dict(tag="clahe", clip_limit=1.0), dict(tag="clahe", tiles=(0, 2)),
                                        dict(tag="log", log_scale=0.0)])
    def test_invalid_params(self, kwargs):
        with pytest.raises(ParameterError):
            EnhanceMethod(**kwargs)

    @given(images, st.sampled_from(["hist", "clahe", "laplacian", "log"]))
    def test_preserves_shape_and_range(self, px, tag):
        out = enhance(GrayImage(px), EnhanceMethod(tag))
        assert out.pixels.shape == px.shape and out.pixels.dtype == np.uint8


class TestPerturb:
    def test_noise_zero_sigma(self, rng):
        img = GrayImage(rng.integers(0, 256, size=(8, 8)))
        assert perturb(img, Perturbation("noise", sigma=0.0, seed=3)) == img

    def test_rotate_zero(self, rng):
        img = GrayImage(rng.integers(0, 256, size=(9, 7)))
        assert perturb(img, Perturbation("rotate", angle=0.0)) == img

    def test_blur_constant(self):
        img = img_of(np.full((10, 10), 123))
        assert perturb(img, Perturbation("blur", sigma=1.0)) == img

    def test_kernel_radius_and_normalisation(self):
        k = gaussian_kernel(1.3)
        assert len(k) == 2 * math.ceil(3 * 1.3) + 1
        assert math.isclose(k.sum(), 1.0)

    def test_blur_preserves_interior_mean(self):
        # constant field with a small interior patch: the kernel never reaches the border
        px = np.full((40, 40), 100.0)
        px[18:22, 18:22] = 200.0
        from veinmatch.imaging import gaussian_blur
        assert math.isclose(gaussian_blur(px, 2.0).mean(), px.mean(), rel_tol=1e-12)

    def test_noise_is_seeded(self, rng):
        img = GrayImage(rng.integers(0, 256, size=(8, 8)))
        a = perturb(img, Perturbation("noise", sigma=10, seed=5))
        assert a == perturb(img, Perturbation("noise", sigma=10, seed=5))
        assert a != perturb(img, Perturbation("noise", sigma=10, seed=6))

    def test_rotate_90_exact(self):
        px = np.arange(9, dtype=float).reshape(3, 3)
        # a quarter turn permutes pixels exactly; positive is clockwise on screen
        assert np.allclose(rotate_array(px, 90), np.rot90(px, -1))
        assert np.allclose(rotate_array(px, -90), np.rot90(px, 1))

    @pytest.mark.parametrize("angle", [3.0, 10.0, 25.0])
    def test_rotate_roundtrip(self, angle):
        yy, xx = np.mgrid[0:64, 0:64]
        px = 128 + 60 * np.sin(xx / 5.0) * np.cos(yy / 7.0)
        img = GrayImage(np.round(px))
        back = perturb(perturb(img, Perturbation("rotate", angle=angle)), Perturbation("rotate", angle=-angle))
        c = slice(16, 48)
        mae = np.abs(back.pixels[c, c].astype(float) - img.pixels[c, c]).mean()
        assert mae <= 3.0

    def test_negative_sigma(self):
        with pytest.raises(ParameterError):
            Perturbation("blur", sigma=-1.0)


class TestTensorAndPgm:
    @pytest.mark.parametrize("v, expect", [(0, 0.0), (255, 1.0), (51, 0.2)])
    def test_to_tensor(self, v, expect):
        t = to_tensor(img_of([[v]]))
        assert t.shape == (1, 1, 1)
        assert math.isclose(t[0, 0, 0], expect)

    @given(images)
    def test_pgm_roundtrip(self, px):
        img = GrayImage(px)
        data = encode_pgm(img)
        assert data.startswith(b"P5\n")
        assert decode_pgm(data) == img

    def test_header_comment(self):
        img = decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        assert img.to_list() == [1, 2]

    @pytest.mark.parametrize("data", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00"])
    def test_rejects_bad_pgm(self, data):
        with pytest.raises(IngestionError):
            decode_pgm(data)

    def test_file_roundtrip(self, tmp_path, rng):
        img = GrayImage(rng.integers(0, 256, size=(5, 7)))
        write_pgm(tmp_path / "a.pgm", img)
        assert read_image(tmp_path / "a.pgm") == img

    def test_png_import(self, tmp_path, rng):
        Image = pytest.importorskip("PIL.Image")
        px = rng.integers(0, 256, size=(6, 4)).astype(np.uint8)
        Image.fromarray(px, mode="L").save(tmp_path / "a.png")
        assert read_image(tmp_path / "a.png") == GrayImage(px)
