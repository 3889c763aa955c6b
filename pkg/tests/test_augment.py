import cv2
import numpy as np
import pytest

from catreid.augment import (AugmentConfig, augment, augment_with_points,
                             random_erase, rotate_image)


@pytest.fixture
def image():
    return np.random.default_rng(1).integers(
        0, 255, size=(120, 160, 3), dtype=np.uint8)


class TestIdentityAndDeterminism:
    def test_all_disabled_is_identity(self, image):
        out = augment(image, AugmentConfig.disabled(), seed=3)
        assert np.array_equal(out, image)

    def test_degenerate_parameters_are_identity(self, image):
        config = AugmentConfig(
            blur_sigma_range=(0.0, 0.0),
            noise_std_range=(0.0, 0.0),
            erase_probability=0.0,
            perspective_distortion=0.0,
            rotation_range=0.0,
        )
        out = augment(image, config, seed=9)
        assert np.array_equal(out, image)

    def test_same_seed_same_output(self, image):
        config = AugmentConfig()
        a = augment(image, config, seed=123)
        b = augment(image, config, seed=123)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self, image):
        config = AugmentConfig()
        a = augment(image, config, seed=1)
        b = augment(image, config, seed=2)
        assert not np.array_equal(a, b)

    def test_dims_dtype_and_range_preserved(self, image):
        config = AugmentConfig()
        for seed in range(8):
            out = augment(image, config, seed=seed)
            assert out.shape == image.shape
            assert out.dtype == image.dtype
            assert out.min() >= 0 and out.max() <= 255

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            augment(np.zeros((0, 0, 3), np.uint8), AugmentConfig(), seed=0)


class TestNoise:
    def test_noise_std_statistical_oracle(self):
        # constant mid-gray image avoids clipping; sample std within 10%
        base = np.full((256, 256, 3), 128, dtype=np.uint8)
        target = 6.0
        config = AugmentConfig(
            enable_blur=False, enable_perspective=False,
            enable_rotation=False, enable_erase=False,
            noise_std_range=(target, target))
        out = augment(base, config, seed=7)
        measured = (out.astype(np.float64) - 128.0).std()
        assert abs(measured - target) / target < 0.10


class TestRotation:
    def test_rotate_then_unrotate_roundtrip(self):
        # smooth blob with flat borders so only resampling error remains
        yy, xx = np.mgrid[0:128, 0:128]
        blob = 200 * np.exp(-(((xx - 64) ** 2 + (yy - 64) ** 2) / 500.0))
        img = np.repeat(blob[..., None], 3, axis=2).astype(np.uint8)
        for theta in (5.0, 10.0, 15.0):
            back = rotate_image(rotate_image(img, theta), -theta)
            mae = np.abs(back.astype(np.float64) - img).mean()
            assert mae < 2.0

    def test_zero_rotation_identity(self, image):
        assert np.array_equal(rotate_image(image, 0.0), image)


class TestRandomErase:
    def test_area_and_untouched_remainder(self):
        img = np.random.default_rng(2).integers(
            0, 100, size=(100, 100, 3), dtype=np.uint8)
        out = random_erase(img, 0.25, seed=5, fill=(255, 255, 255))
        changed = np.any(out != img, axis=2)
        count = int(changed.sum())
        assert abs(count - 2500) <= 1
        assert np.array_equal(out[~changed], img[~changed])

    def test_single_rectangle_connected_component_oracle(self):
        img = np.random.default_rng(3).integers(
            0, 100, size=(80, 120, 3), dtype=np.uint8)
        out = random_erase(img, 0.1, seed=11, fill=(255, 255, 255))
        mask = np.any(out != img, axis=2).astype(np.uint8)
        n_components, labels = cv2.connectedComponents(mask)
        assert n_components == 2  # background + one region
        ys, xs = np.nonzero(mask)
        bbox_area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        assert bbox_area == mask.sum()  # the region is a filled rectangle

    def test_deterministic(self):
        img = np.random.default_rng(4).integers(
            0, 255, size=(64, 64, 3), dtype=np.uint8)
        a = random_erase(img, 0.2, seed=21)
        b = random_erase(img, 0.2, seed=21)
        assert np.array_equal(a, b)

    def test_default_fill_is_image_mean(self):
        img = np.zeros((50, 50, 3), np.uint8)
        img[..., 0] = 40
        img[..., 1] = 80
        img[..., 2] = 120
        out = random_erase(img, 0.2, seed=1)
        # constant image: mean fill equals the image, so nothing may change
        assert np.array_equal(out, img)

    def test_bad_fraction(self):
        img = np.zeros((10, 10, 3), np.uint8)
        with pytest.raises(ValueError):
            random_erase(img, 0.0, seed=0)
        with pytest.raises(ValueError):
            random_erase(img, 1.0, seed=0)


class TestGeometricPointConsistency:
    def test_points_follow_rotation(self):
        img = np.random.default_rng(5).integers(
            0, 255, size=(100, 100, 3), dtype=np.uint8)
        pts = np.array([[49.5, 49.5], [30.0, 70.0]])  # first: rotation center
        config = AugmentConfig(enable_blur=False, enable_noise=False,
                               enable_perspective=False, enable_erase=False,
                               rotation_range=20.0)
        _, moved = augment_with_points(img, pts, config, seed=6)
        np.testing.assert_allclose(moved[0], pts[0], atol=1e-9)
        # distance to the fixed point is preserved by the rigid transform
        d0 = np.linalg.norm(pts[1] - pts[0])
        d1 = np.linalg.norm(moved[1] - moved[0])
        np.testing.assert_allclose(d0, d1, atol=1e-6)
        assert not np.allclose(moved[1], pts[1])  # the point did rotate

    def test_points_follow_perspective_corners(self):
        img = np.random.default_rng(6).integers(
            0, 255, size=(90, 110, 3), dtype=np.uint8)
        corners = np.array([[0.0, 0.0], [110.0, 0.0], [110.0, 90.0],
                            [0.0, 90.0]])
        config = AugmentConfig(enable_blur=False, enable_noise=False,
                               enable_rotation=False, enable_erase=False,
                               perspective_distortion=0.3)
        _, moved = augment_with_points(img, corners, config, seed=8)
        # corners move inward, never outward
        assert (moved[:, 0] >= -1e-6).all() and (moved[:, 0] <= 110 + 1e-6).all()
        assert (moved[:, 1] >= -1e-6).all() and (moved[:, 1] <= 90 + 1e-6).all()


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"blur_sigma_range": (-1.0, 2.0)},
        {"blur_sigma_range": (2.0, 1.0)},
        {"noise_std_range": (-0.1, 1.0)},
        {"erase_probability": 1.5},
        {"erase_area_range": (0.0, 0.2)},
        {"erase_area_range": (0.5, 0.2)},
        {"perspective_distortion": -0.2},
        {"rotation_range": -5.0},
    ])
    def test_bad_ranges_rejected_at_construction(self, kwargs):
        with pytest.raises(ValueError):
            AugmentConfig(**kwargs)
