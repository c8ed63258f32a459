import math

import numpy as np
import pytest

from scoreblobs import imaging, synth
from scoreblobs.errors import ImageError
from scoreblobs.imaging import AugmentConfig, Blob, BoundingBox, DogConfig

from conftest import gaussian_spot_page


def dog_response_oracle(sigma_blob, amplitude, cfg: DogConfig):
    """Closed-form scale-normalized DoG response of a Gaussian spot.

    A Gaussian of amplitude A and scale s smoothed by a Gaussian of scale t
    keeps a Gaussian profile with center value A*s^2/(s^2+t^2); the layer
    responses follow directly, independent of the detector code.
    """
    sigmas = cfg.sigmas()
    ratio = sigmas[1] / sigmas[0]
    s2 = sigma_blob**2
    values = []
    for i in range(len(sigmas) - 1):
        a = s2 / (s2 + sigmas[i] ** 2)
        b = s2 / (s2 + sigmas[i + 1] ** 2)
        values.append(amplitude * (a - b) / (ratio - 1.0))
    return sigmas, np.array(values)


class TestBoundingBox:
    def test_valid(self):
        b = BoundingBox(1, 2, 5, 9)
        assert (b.width, b.height) == (4, 7)

    @pytest.mark.parametrize("coords", [(5, 0, 5, 10), (0, 5, 10, 5), (-1, 0, 3, 3), (3, 0, 1, 3)])
    def test_degenerate(self, coords):
        with pytest.raises(ImageError):
            BoundingBox(*coords)

    def test_roundtrip(self):
        b = BoundingBox(0, 1, 2, 3)
        assert BoundingBox.from_dict(b.to_dict()) == b


class TestRemoveStaffLines:
    def test_lines_only_page_cleared(self):
        page = synth.blank_page(200, 400, paper=255)
        synth.draw_staff_lines(page, 50, n_lines=5, thickness=3, spacing=18, intensity=0)
        out = imaging.remove_staff_lines(page)
        assert out.shape == page.shape
        row_darkness = (out < 128).mean(axis=1)
        assert row_darkness.max() <= 0.05

    def test_all_white_unchanged(self):
        page = np.full((120, 300), 255, dtype=np.uint8)
        out = imaging.remove_staff_lines(page)
        assert (out == page).all()

    def test_uniform_page_notice(self, caplog):
        page = np.full((120, 300), 77, dtype=np.uint8)
        with caplog.at_level("WARNING"):
            out = imaging.remove_staff_lines(page)
        assert (out == page).all()
        assert any("no staff lines" in r.message for r in caplog.records)

    def test_glyph_crossing_line_is_kept(self):
        page = synth.blank_page(200, 400, paper=255)
        synth.draw_staff_lines(page, 50, 5, 3, 18, 0)
        ellipse = synth.draw_ellipse(page, 200, 60, 10, 10, 0, 0)
        out = imaging.remove_staff_lines(page)
        retained = ((out < 128) & ellipse).sum() / ellipse.sum()
        assert retained >= 0.95
        line_only = (page < 128) & ~ellipse
        cleared = ((out >= 128) & line_only).sum() / line_only.sum()
        assert cleared >= 0.95

    def test_never_adds_ink(self, small_corpus):
        page = imaging.load_image(small_corpus.page_paths[0])
        out = imaging.remove_staff_lines(page)
        assert (((out < 128) & ~(page < 128)).sum()) == 0


class TestDetectBlobs:
    def test_single_spot_matches_oracle(self):
        cfg = DogConfig()
        page = gaussian_spot_page(400, 100, 100, sigma=20.0)
        blobs = imaging.detect_blobs(page, cfg)
        assert len(blobs) == 1
        b = blobs[0]
        assert abs(b.cx - 100) <= 2 and abs(b.cy - 100) <= 2
        sigmas, responses = dog_response_oracle(20.0, 1.0, cfg)
        expected_sigma = sigmas[int(responses.argmax())]
        assert b.sigma == pytest.approx(expected_sigma)
        # within one ladder step of the true scale
        ratio = sigmas[1] / sigmas[0]
        assert 20.0 / ratio <= b.sigma <= 20.0 * ratio
        assert b.response == pytest.approx(responses.max(), rel=0.1)

    def test_all_white_empty(self):
        assert imaging.detect_blobs(np.full((200, 200), 255, np.uint8)) == []

    def test_two_separated_spots(self):
        ys, xs = np.mgrid[0:400, 0:400]
        field = 255.0 - 255.0 * (
            np.exp(-((xs - 100.0) ** 2 + (ys - 100.0) ** 2) / (2 * 15.0**2))
            + np.exp(-((xs - 300.0) ** 2 + (ys - 300.0) ** 2) / (2 * 15.0**2))
        )
        blobs = imaging.detect_blobs(np.clip(field, 0, 255).astype(np.uint8))
        assert len(blobs) == 2
        centers = sorted((b.cx, b.cy) for b in blobs)
        assert abs(centers[0][0] - 100) <= 2 and abs(centers[1][0] - 300) <= 2

    def test_too_small_image(self):
        with pytest.raises(ImageError, match="too small"):
            imaging.detect_blobs(np.full((80, 80), 255, np.uint8))

    def test_count_non_increasing_in_threshold(self, small_corpus):
        page = imaging.load_image(small_corpus.page_paths[0])
        nostaff = imaging.remove_staff_lines(page)
        counts = [
            len(imaging.detect_blobs(nostaff, DogConfig(threshold=t)))
            for t in (0.05, 0.1, 0.2, 0.4)
        ]
        assert counts == sorted(counts, reverse=True)

    def test_translation_equivariance(self):
        base = imaging.detect_blobs(gaussian_spot_page(400, 150, 150, 20.0))
        shifted = imaging.detect_blobs(gaussian_spot_page(400, 173, 141, 20.0))
        assert len(base) == len(shifted) == 1
        assert abs((shifted[0].cx - base[0].cx) - 23) <= 1
        assert abs((shifted[0].cy - base[0].cy) - (-9)) <= 1


class TestBlobToBbox:
    def test_interior(self):
        img = np.zeros((400, 400), np.uint8)
        box = imaging.blob_to_bbox(Blob(100, 100, 10.0, 1.0), img)
        assert (box.x0, box.y0, box.x1, box.y1) == (85, 85, 115, 115)

    def test_corner_clip(self):
        img = np.zeros((400, 400), np.uint8)
        box = imaging.blob_to_bbox(Blob(0, 0, 10.0, 1.0), img)
        assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 15, 15)

    def test_full_clip(self):
        img = np.zeros((60, 60), np.uint8)
        box = imaging.blob_to_bbox(Blob(50, 50, 50.0, 1.0), img)
        assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 60, 60)


class TestCrop:
    def test_full_image(self):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        out = imaging.crop(img, BoundingBox(0, 0, 4, 3))
        assert (out == img).all()

    def test_single_pixel(self):
        img = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        out = imaging.crop(img, BoundingBox(1, 0, 2, 1))
        assert out.shape == (1, 1) and out[0, 0] == 255

    def test_crop_embed_roundtrip(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, (50, 70)).astype(np.uint8)
        box = BoundingBox(10, 5, 33, 29)
        patch = imaging.crop(img, box)
        rebuilt = img.copy()
        rebuilt[box.y0:box.y1, box.x0:box.x1] = patch
        assert (rebuilt == img).all()

    def test_out_of_bounds(self):
        img = np.zeros((10, 10), np.uint8)
        with pytest.raises(ImageError):
            imaging.crop(img, BoundingBox(5, 5, 12, 8))


class TestRescaleIntensity:
    def test_affine_map_with_half_up_rounding(self):
        arr = np.array([[10, 110, 210]], dtype=np.uint8)
        assert imaging.rescale_intensity(arr).tolist() == [[0, 128, 255]]

    def test_constant_maps_to_zero(self):
        arr = np.full((4, 4), 99, np.uint8)
        assert (imaging.rescale_intensity(arr) == 0).all()

    def test_spanning_image_unchanged(self):
        arr = np.array([[0, 77, 255]], dtype=np.uint8)
        assert (imaging.rescale_intensity(arr) == arr).all()

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        arr = rng.integers(30, 200, (20, 20)).astype(np.uint8)
        once = imaging.rescale_intensity(arr)
        assert (imaging.rescale_intensity(once) == once).all()


class TestAugment:
    def test_deterministic_per_seed(self):
        img = np.random.default_rng(0).integers(0, 256, (90, 130)).astype(np.uint8)
        cfg = AugmentConfig()
        a = imaging.augment(img, cfg, np.random.default_rng(123))
        b = imaging.augment(img, cfg, np.random.default_rng(123))
        assert (a == b).all()

    @pytest.mark.parametrize("shape", [(40, 40), (300, 150), (77, 501)])
    def test_output_always_256(self, shape):
        img = np.random.default_rng(1).integers(0, 256, shape).astype(np.uint8)
        out = imaging.augment(img, AugmentConfig(), np.random.default_rng(0))
        assert out.shape == (256, 256)

    def test_constant_field_stays_constant(self):
        img = np.full((64, 64), 128, np.uint8)
        cfg = AugmentConfig(jitter_factor=0.0)
        out = imaging.augment(img, cfg, np.random.default_rng(7))
        assert (out == 128).all()

    def test_double_flip_identity(self):
        img = np.random.default_rng(2).integers(0, 256, (8, 9)).astype(np.uint8)
        assert (img[:, ::-1][:, ::-1] == img).all()

    def test_target_size_invariant(self):
        with pytest.raises(ImageError):
            AugmentConfig(target_size=(128, 128))


class TestIO:
    def test_png_roundtrip(self, tmp_path):
        img = np.random.default_rng(3).integers(0, 256, (30, 40)).astype(np.uint8)
        path = tmp_path / "x.png"
        imaging.save_image(img, path)
        assert (imaging.load_image(path) == img).all()

    def test_rgb_luma_conversion(self, tmp_path):
        from PIL import Image

        rgb = np.zeros((4, 4, 3), np.uint8)
        rgb[..., 0] = 200  # pure red
        path = tmp_path / "rgb.png"
        Image.fromarray(rgb, "RGB").save(path)
        gray = imaging.load_image(path)
        assert (gray == round(0.299 * 200)).all()

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"not a png")
        with pytest.raises(ImageError, match="bad.png"):
            imaging.load_image(path)
