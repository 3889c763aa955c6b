"""Seeded training-time image degradations for camera-trap conditions.

Rasters are RGB uint8 HWC arrays.  Enabled ops run in a fixed order
(blur -> noise -> perspective -> rotate -> erase) with parameters sampled
from a generator seeded per call, so the same (config, seed) always yields
the same output.  ``augment_with_points`` additionally pushes keypoints
through the geometric ops so part extraction stays coherent with the
degraded full image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    blur_sigma_range: tuple[float, float] = (0.0, 2.0)
    noise_std_range: tuple[float, float] = (0.0, 10.0)  # 8-bit intensity units
    erase_probability: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.20)
    perspective_distortion: float = 0.2
    rotation_range: float = 15.0  # degrees, symmetric
    erase_fill: Optional[tuple[float, float, float]] = None  # None: image mean
    enable_blur: bool = True
    enable_noise: bool = True
    enable_perspective: bool = True
    enable_rotation: bool = True
    enable_erase: bool = True

    def __post_init__(self):
        lo, hi = self.blur_sigma_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad blur_sigma_range {self.blur_sigma_range}")
        lo, hi = self.noise_std_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad noise_std_range {self.noise_std_range}")
        if not 0.0 <= self.erase_probability <= 1.0:
            raise ValueError(f"bad erase_probability {self.erase_probability}")
        lo, hi = self.erase_area_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"bad erase_area_range {self.erase_area_range}")
        if self.perspective_distortion < 0:
            raise ValueError("perspective_distortion must be non-negative")
        if self.rotation_range < 0:
            raise ValueError("rotation_range must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enable_blur=False, enable_noise=False,
                   enable_perspective=False, enable_rotation=False,
                   enable_erase=False)


def _apply_homography_to_points(points: np.ndarray, matrix: np.ndarray
                                ) -> np.ndarray:
    homo = np.hstack([points, np.ones((len(points), 1))])
    mapped = homo @ matrix.T
    return mapped[:, :2] / mapped[:, 2:3]


def rotation_matrix(image: np.ndarray, angle_degrees: float) -> np.ndarray:
    height, width = image.shape[:2]
    center = ((width - 1) / 2.0, (height - 1) / 2.0)
    return cv2.getRotationMatrix2D(center, angle_degrees, 1.0)


def rotate_image(image: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Rotate about the image center, same dimensions, replicate borders."""
    if angle_degrees == 0.0:
        return image.copy()
    height, width = image.shape[:2]
    return cv2.warpAffine(image, rotation_matrix(image, angle_degrees),
                          (width, height), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REPLICATE)


def _erase_dims(area: int, height: int, width: int, aspect: float
                ) -> tuple[int, int]:
    """Integer (h, w) with h*w as close to `area` as the image allows.

    Among the candidates minimising |h*w - area| the aspect ratio closest
    to the requested one wins, so the region stays seeded-random in shape
    while the erased pixel count honours the request.
    """
    h_lo = max(1, int(np.ceil(area / width)))
    h_hi = min(height, area)
    if h_lo > h_hi:  # area larger than the image; take everything
        return height, width
    hs = np.arange(h_lo, h_hi + 1)
    ws = np.clip(np.round(area / hs).astype(int), 1, width)
    err = np.abs(hs * ws - area)
    aspect_err = np.abs(np.log((hs / ws) / aspect))
    best = np.lexsort((aspect_err, err))[0]
    return int(hs[best]), int(ws[best])


def random_erase(image: np.ndarray, area_fraction: float, seed: int,
                 fill: Optional[tuple[float, float, float]] = None
                 ) -> np.ndarray:
    """Replace exactly one rectangle of ~area_fraction of the image.

    The rest of the image is returned bit-identical.  Fill defaults to the
    per-channel image mean (a dataset mean can be passed instead).
    """
    if not 0.0 < area_fraction < 1.0:
        raise ValueError(f"area_fraction must be in (0, 1), got {area_fraction}")
    rng = np.random.default_rng(seed)
    height, width = image.shape[:2]
    target = int(round(area_fraction * height * width))
    aspect = float(np.exp(rng.uniform(np.log(0.3), np.log(1 / 0.3))))
    h, w = _erase_dims(max(target, 1), height, width, aspect)
    y0 = int(rng.integers(0, height - h + 1))
    x0 = int(rng.integers(0, width - w + 1))
    if fill is None:
        fill = tuple(image.reshape(-1, image.shape[2]).mean(axis=0)) \
            if image.ndim == 3 else (float(image.mean()),)
    out = image.copy()
    value = np.asarray(fill, dtype=np.float64)
    if np.issubdtype(image.dtype, np.integer):
        value = np.round(value)
    out[y0:y0 + h, x0:x0 + w] = value.astype(image.dtype)
    return out


def augment_with_points(image: np.ndarray, points: Optional[np.ndarray],
                        config: AugmentConfig, seed: int
                        ) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Full pipeline; geometric ops are applied to `points` as well."""
    if image.size == 0:
        raise ValueError("cannot augment an empty image")
    rng = np.random.default_rng(seed)
    out = image.copy()
    pts = None if points is None else np.asarray(points, dtype=np.float64).copy()
    height, width = out.shape[:2]

    if config.enable_blur:
        sigma = float(rng.uniform(*config.blur_sigma_range))
        if sigma > 0:
            out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma)

    if config.enable_noise:
        std = float(rng.uniform(*config.noise_std_range))
        if std > 0:
            noise = rng.normal(0.0, std, size=out.shape)
            out = np.clip(out.astype(np.float64) + noise, 0, 255)
            out = np.round(out).astype(image.dtype)

    if config.enable_perspective and config.perspective_distortion > 0:
        d = config.perspective_distortion
        src = np.array([[0, 0], [width, 0], [width, height], [0, height]],
                       dtype=np.float32)
        max_dx, max_dy = d * width / 2.0, d * height / 2.0
        inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float32)
        offsets = rng.uniform(0.0, 1.0, size=(4, 2)).astype(np.float32)
        dst = src + inward * offsets * np.array([max_dx, max_dy], dtype=np.float32)
        if not np.array_equal(src, dst):
            matrix = cv2.getPerspectiveTransform(src, dst)
            out = cv2.warpPerspective(out, matrix, (width, height),
                                      flags=cv2.INTER_LINEAR,
                                      borderMode=cv2.BORDER_REPLICATE)
            if pts is not None:
                pts = _apply_homography_to_points(pts, matrix)

    if config.enable_rotation and config.rotation_range > 0:
        angle = float(rng.uniform(-config.rotation_range, config.rotation_range))
        if angle != 0.0:
            matrix = rotation_matrix(out, angle)
            out = rotate_image(out, angle)
            if pts is not None:
                pts = _apply_homography_to_points(
                    pts, np.vstack([matrix, [0.0, 0.0, 1.0]]))

    if config.enable_erase and config.erase_probability > 0:
        if rng.uniform() < config.erase_probability:
            area = float(rng.uniform(*config.erase_area_range))
            out = random_erase(out, area, int(rng.integers(0, 2**31)),
                               fill=config.erase_fill)

    return out, pts


def augment(image: np.ndarray, config: AugmentConfig, seed: int) -> np.ndarray:
    """Apply the enabled ops to an image; dimensions and dtype preserved."""
    out, _ = augment_with_points(image, None, config, seed)
    return out
