"""Procedural toy-cat dataset: textured silhouettes with analytic keypoints.

Each synthetic cat carries its own stripe/blotch pelage; the two flanks use
different pattern variants, and day/night capture is simulated by
brightness, saturation and sensor-noise shifts.  Poses are rigid transforms
of a fixed side-view template, so all 17 keypoints and the bbox are exact
by construction and the geometry pipeline is exercised end to end.

Default structure mirrors the real test-cat layout: every cat is observed
from both sides at night, and exactly one cat also has daytime images, so
the four partition settings yield 4 / 5 / 8 / 10 entities on 4 cats.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

# Template keypoints (left flank, cat facing right, y down, ~pixel units).
_TEMPLATE_KEYPOINTS = np.array([
    (75, -38),   # 0  left ear
    (65, -40),   # 1  right ear
    (90, -15),   # 2  nose
    (36, 5),     # 3  right shoulder
    (31, 56),    # 4  right front paw
    (45, 8),     # 5  left shoulder
    (44, 56),    # 6  left front paw
    (-36, 3),    # 7  right hip
    (-34, 30),   # 8  right knee
    (-31, 56),   # 9  right back paw
    (-45, 6),    # 10 left hip
    (-43, 32),   # 11 left knee
    (-42, 56),   # 12 left back paw
    (-58, -8),   # 13 tail root
    (0, 0),      # 14 center
    (-90, -28),  # 15 proximal tail
    (-118, -42),  # 16 distal tail
], dtype=np.float64)

_LEG_SEGMENTS = [(5, 6), (3, 4), (10, 12), (7, 9)]
_TAIL_SEGMENTS = [(13, 15), (15, 16)]


@dataclass(frozen=True)
class PelageParams:
    base_rgb: tuple[float, float, float]
    stripe_wavelength: float
    stripe_angle: float
    stripe_phase: float
    stripe_depth: float
    blotch_centers: np.ndarray  # (k, 2) template coords
    blotch_radius: float


def _pelage_for(cat_idx: int, side: str, seed: int) -> PelageParams:
    """Deterministic per-(cat, side) pattern; cats differ in geometry, not
    just hue, so they stay separable in desaturated night shots."""
    side_idx = 0 if side == "left" else 1
    rng = np.random.default_rng([seed, 1000 + cat_idx, side_idx])
    hue = (0.07 + 0.31 * cat_idx) % 1.0
    sat = 0.45 + 0.1 * (cat_idx % 3)
    val = 0.55 + 0.08 * ((cat_idx + 1) % 3)
    base = colorsys.hsv_to_rgb(hue, sat, val)
    angle = 0.35 + 0.75 * cat_idx + 0.9 * side_idx + rng.uniform(-0.05, 0.05)
    return PelageParams(
        base_rgb=tuple(255.0 * c for c in base),
        stripe_wavelength=9.0 + 4.0 * cat_idx + rng.uniform(-0.5, 0.5),
        stripe_angle=angle,
        stripe_phase=rng.uniform(0, 2 * np.pi),
        stripe_depth=0.45 + 0.1 * (cat_idx % 2),
        blotch_centers=rng.uniform(-55, 55, size=(3 + cat_idx % 3, 2)),
        blotch_radius=7.0 + 2.0 * (cat_idx % 4),
    )


def _segment_distance(u, v, a, b):
    au, av = u - a[0], v - a[1]
    du, dv = b[0] - a[0], b[1] - a[1]
    t = np.clip((au * du + av * dv) / (du * du + dv * dv), 0.0, 1.0)
    return np.hypot(au - t * du, av - t * dv)


def _cat_mask(u, v):
    body = (u / 62.0) ** 2 + (v / 28.0) ** 2 <= 1.0
    head = ((u - 70) / 23.0) ** 2 + ((v + 18) / 22.0) ** 2 <= 1.0
    ears = np.hypot(u - 75, v + 38) <= 8.0
    ears |= np.hypot(u - 65, v + 40) <= 8.0
    mask = body | head | ears
    for ia, ib in _LEG_SEGMENTS:
        mask |= _segment_distance(u, v, _TEMPLATE_KEYPOINTS[ia],
                                  _TEMPLATE_KEYPOINTS[ib]) <= 6.0
    for ia, ib in _TAIL_SEGMENTS:
        mask |= _segment_distance(u, v, _TEMPLATE_KEYPOINTS[ia],
                                  _TEMPLATE_KEYPOINTS[ib]) <= 5.5
    return mask


def _render(cat_idx: int, side: str, time_of_day: str, seed: int,
            rng: np.random.Generator, image_size: tuple[int, int]
            ) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int, int]]:
    width, height = image_size
    pelage = _pelage_for(cat_idx, side, seed)

    # pose ranges keep the whole silhouette inside the frame at 320x240
    theta = np.deg2rad(rng.uniform(-12, 12))
    scale = rng.uniform(0.85, 1.05)
    center = np.array([width / 2 + rng.uniform(-14, 14),
                       height / 2 + rng.uniform(-10, 10)])
    mirror = -1.0 if side == "right" else 1.0
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])

    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    rel = np.stack([xs - center[0], ys - center[1]], axis=-1) / scale
    u = (rel[..., 0] * rot[0, 0] + rel[..., 1] * rot[1, 0]) * mirror
    v = rel[..., 0] * rot[0, 1] + rel[..., 1] * rot[1, 1]

    mask = _cat_mask(u, v)

    phase = (u * np.cos(pelage.stripe_angle) + v * np.sin(pelage.stripe_angle))
    stripes = np.sin(2 * np.pi * phase / pelage.stripe_wavelength
                     + pelage.stripe_phase) > 0.25
    blotch = np.zeros_like(u, dtype=bool)
    for bu, bv in pelage.blotch_centers:
        blotch |= np.hypot(u - bu, v - bv) <= pelage.blotch_radius

    shade = np.ones_like(u)
    shade[stripes] -= pelage.stripe_depth
    shade[blotch] -= 0.3
    shade = np.clip(shade, 0.12, 1.0)

    # background: smooth low-frequency clutter
    bg_small = rng.uniform(0, 1, size=(height // 16 + 1, width // 16 + 1))
    bg = cv2.resize(bg_small, (width, height), interpolation=cv2.INTER_CUBIC)
    if time_of_day == "day":
        bg_rgb = np.stack([90 + 60 * bg, 110 + 70 * bg, 70 + 50 * bg], axis=-1)
    else:
        bg_rgb = np.stack([30 + 25 * bg] * 3, axis=-1)

    img = bg_rgb.copy()
    for ch in range(3):
        img[..., ch][mask] = pelage.base_rgb[ch] * shade[mask]

    if time_of_day == "night":
        gray = img.mean(axis=-1, keepdims=True)
        img = 0.15 * img + 0.85 * gray  # IR-ish desaturation
        img *= 0.7
        img += rng.normal(0, 7.0, size=img.shape)
    else:
        img += rng.normal(0, 3.0, size=img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)

    kps = _TEMPLATE_KEYPOINTS.copy()
    kps[:, 0] *= mirror
    kps = kps @ rot.T * scale + center

    ys_m, xs_m = np.nonzero(mask)
    x0, x1 = int(xs_m.min()), int(xs_m.max())
    y0, y1 = int(ys_m.min()), int(ys_m.max())
    pad = 6
    x0, y0 = max(0, x0 - pad), max(0, y0 - pad)
    x1, y1 = min(width - 1, x1 + pad), min(height - 1, y1 + pad)
    bbox = (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    return img, kps, bbox


def generate_toy_dataset(out_dir: str | Path, cats: int = 4,
                         images_per_entity: int = 20, seed: int = 0,
                         image_size: tuple[int, int] = (320, 240),
                         day_cats: int = 1,
                         tail_dropout: float = 0.06) -> Path:
    """Write images/ plus manifest.jsonl under out_dir; returns manifest path.

    Every cat gets left+right night entities; the first ``day_cats`` cats
    additionally get left+right day entities.  ``tail_dropout`` is the
    chance that a tail keypoint is marked invisible, exercising the
    zero-embedding path end to end.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"

    entities = []
    for cat_idx in range(cats):
        for side in ("left", "right"):
            entities.append((cat_idx, side, "night"))
            if cat_idx < day_cats:
                entities.append((cat_idx, side, "day"))

    records = []
    for cat_idx, side, tod in entities:
        for k in range(images_per_entity):
            rng = np.random.default_rng(
                [seed, cat_idx, 0 if side == "left" else 1,
                 0 if tod == "night" else 1, k])
            img, kps, bbox = _render(cat_idx, side, tod, seed, rng, image_size)
            name = f"cat{cat_idx:02d}_{side}_{tod}_{k:03d}.png"
            cv2.imwrite(str(out_dir / "images" / name),
                        cv2.cvtColor(img, cv2.COLOR_RGB2BGR))

            visible = np.ones(17, dtype=bool)
            if rng.uniform() < tail_dropout:
                visible[16] = False
            if rng.uniform() < tail_dropout / 2:
                visible[15] = False
                visible[16] = False

            hour = int(rng.integers(10, 16)) if tod == "day" \
                else int(rng.integers(21, 24))
            capture = f"2024-03-{(k % 27) + 1:02d}T{hour:02d}:{k % 60:02d}:00"
            records.append({
                "image_path": f"images/{name}",
                "cat_id": f"cat{cat_idx:02d}",
                "side": side,
                "time_of_day": tod,
                "capture_time": capture,
                "camera_id": f"cam{cat_idx % 3}",
                "bbox": list(bbox),
                "keypoints": [[float(x), float(y), bool(vv)]
                              for (x, y), vv in zip(kps, visible)],
            })

    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest_path
