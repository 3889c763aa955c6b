"""Keypoints -> oriented part crops (trunk, four limbs, two tail segments).

All quads live in image pixel coordinates, with corners marking the outer
edges of the covered pixel area (so an axis-aligned quad from (x0, y0) to
(x0+w, y0+h) covers exactly ``img[y0:y0+h, x0:x0+w]``).  Every construction
here is translation- and rotation-equivariant.

Keypoint indices 0-14 are treated opaquely; which indices anchor the body
axis, trunk and limbs is configuration (defaults follow the ATRW-style
body-joint layout).  Indices 15/16 are the proximal/distal tail points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import cv2
import numpy as np

from .data import KeypointSet, TAIL_DISTAL, TAIL_PROXIMAL

PART_NAMES = (
    "trunk",
    "limb_fl",
    "limb_fr",
    "limb_bl",
    "limb_br",
    "tail_proximal",
    "tail_distal",
)
LIMB_PARTS = PART_NAMES[1:5]
TAIL_PARTS = PART_NAMES[5:]

_DEFAULT_LIMB_PAIRS = {
    "limb_fl": (5, 6),   # left shoulder -> left front paw
    "limb_fr": (3, 4),   # right shoulder -> right front paw
    "limb_bl": (10, 12),  # left hip -> left back paw
    "limb_br": (7, 9),   # right hip -> right back paw
}


@dataclass(frozen=True)
class Quad:
    """Four corners in consistent winding order, shape (4, 2) float."""

    corners: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64)
        if c.shape != (4, 2):
            raise ValueError(f"quad needs 4 corners, got shape {c.shape}")
        object.__setattr__(self, "corners", c)

    def area(self) -> float:
        x, y = self.corners[:, 0], self.corners[:, 1]
        return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0

    def contains(self, point, tol: float = 1e-9) -> bool:
        """Point-in-convex-polygon test (boundary counts as inside)."""
        p = np.asarray(point, dtype=np.float64)
        d = np.roll(self.corners, -1, axis=0) - self.corners
        r = p[None, :] - self.corners
        cross = d[:, 0] * r[:, 1] - d[:, 1] * r[:, 0]
        return bool(np.all(cross >= -tol) or np.all(cross <= tol))


@dataclass(frozen=True)
class PartCrop:
    part: str
    valid: bool
    quad: Optional[Quad] = None

    def __post_init__(self):
        if self.part not in PART_NAMES:
            raise ValueError(f"unknown part {self.part!r}")
        if self.valid and self.quad is None:
            raise ValueError("valid crop must carry a quad")
        if not self.valid and self.quad is not None:
            raise ValueError("invalid crop must not carry a quad")


@dataclass(frozen=True)
class PartConfig:
    """Geometry knobs: which keypoints define which part, and crop shapes.

    ``limb_ratio`` is the rectangle width as a fraction of its length
    (limbs are thin, so the default makes width one third of the height).
    ``trunk_padding`` expands the trunk rectangle on every side by that
    fraction of the body-axis length.  Image sizes are (width, height).
    """

    limb_ratio: float = 1.0 / 3.0
    trunk_padding: float = 0.1
    limb_image_size: tuple[int, int] = (96, 96)
    trunk_image_size: tuple[int, int] = (192, 96)
    limb_keypoint_pairs: Mapping[str, tuple[int, int]] = field(
        default_factory=lambda: dict(_DEFAULT_LIMB_PAIRS)
    )
    trunk_keypoint_set: frozenset[int] = frozenset({3, 5, 7, 10, 13, 14})
    front_anchor_set: frozenset[int] = frozenset({3, 5})
    rear_anchor_set: frozenset[int] = frozenset({7, 10, 13})
    tail_root_index: int = 13

    def __post_init__(self):
        if not 0.0 < self.limb_ratio <= 1.0:
            raise ValueError(f"limb_ratio must be in (0, 1], got {self.limb_ratio}")
        if self.trunk_padding < 0:
            raise ValueError("trunk_padding must be non-negative")
        indices = set(self.trunk_keypoint_set) | set(self.front_anchor_set) \
            | set(self.rear_anchor_set) | {self.tail_root_index}
        for pair in self.limb_keypoint_pairs.values():
            indices.update(pair)
        if any(i < 0 or i > 16 for i in indices):
            raise ValueError("keypoint indices must lie in 0..16")

    def image_size_for(self, part: str) -> tuple[int, int]:
        return self.trunk_image_size if part == "trunk" else self.limb_image_size


def _centroid(keypoints: KeypointSet, indices) -> Optional[np.ndarray]:
    pts = [keypoints.xy(i) for i in sorted(indices) if keypoints.visible(i)]
    if not pts:
        return None
    return np.mean(np.asarray(pts, dtype=np.float64), axis=0)


def body_axis(keypoints: KeypointSet, config: PartConfig = PartConfig()
              ) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Oriented body axis: (unit vector rear->front, midpoint), or None.

    The axis points from the centroid of visible rear anchors (hips, tail
    root) to the centroid of visible front anchors (shoulders).  None when
    either anchor group is fully invisible or the centroids coincide.
    """
    front = _centroid(keypoints, config.front_anchor_set)
    rear = _centroid(keypoints, config.rear_anchor_set)
    if front is None or rear is None:
        return None
    delta = front - rear
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        return None
    return delta / norm, (front + rear) / 2.0


def axis_length(keypoints: KeypointSet, config: PartConfig = PartConfig()
                ) -> Optional[float]:
    front = _centroid(keypoints, config.front_anchor_set)
    rear = _centroid(keypoints, config.rear_anchor_set)
    if front is None or rear is None:
        return None
    return float(np.linalg.norm(front - rear))


def trunk_quad(keypoints: KeypointSet, config: PartConfig = PartConfig()
               ) -> PartCrop:
    """Minimum rectangle aligned with the body axis around trunk keypoints.

    Expanded outward on every side by trunk_padding x body-axis length.
    Invalid when the axis is unavailable or fewer than 3 trunk keypoints
    are visible.
    """
    axis = body_axis(keypoints, config)
    visible = [np.asarray(keypoints.xy(i))
               for i in sorted(config.trunk_keypoint_set) if keypoints.visible(i)]
    if axis is None or len(visible) < 3:
        return PartCrop(part="trunk", valid=False)
    u, _ = axis
    v = np.array([-u[1], u[0]])
    pts = np.asarray(visible, dtype=np.float64)
    s = pts @ u
    t = pts @ v
    pad = config.trunk_padding * (axis_length(keypoints, config) or 0.0)
    s0, s1 = s.min() - pad, s.max() + pad
    t0, t1 = t.min() - pad, t.max() + pad
    if s1 <= s0 or t1 <= t0:
        return PartCrop(part="trunk", valid=False)
    corners = np.array([
        s0 * u + t0 * v,
        s1 * u + t0 * v,
        s1 * u + t1 * v,
        s0 * u + t1 * v,
    ])
    return PartCrop(part="trunk", valid=True, quad=Quad(corners))


def limb_rect(a, b, ratio: float) -> Quad:
    """Rectangle covering segment ab: length |b-a| along it, width ratio*|b-a|."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        raise ValueError("limb endpoints coincide")
    d = (b - a) / length
    n = np.array([-d[1], d[0]])
    half_w = ratio * length / 2.0
    corners = np.array([
        a - half_w * n,
        a + half_w * n,
        b + half_w * n,
        b - half_w * n,
    ])
    return Quad(corners)


def _segment_crop(keypoints: KeypointSet, part: str, idx_a: int, idx_b: int,
                  ratio: float) -> PartCrop:
    if not (keypoints.visible(idx_a) and keypoints.visible(idx_b)):
        return PartCrop(part=part, valid=False)
    a, b = np.asarray(keypoints.xy(idx_a)), np.asarray(keypoints.xy(idx_b))
    if np.linalg.norm(b - a) == 0.0:
        return PartCrop(part=part, valid=False)
    return PartCrop(part=part, valid=True, quad=limb_rect(a, b, ratio))


def part_crops(keypoints: KeypointSet, config: PartConfig = PartConfig()
               ) -> dict[str, PartCrop]:
    """All seven part crops; invalid whenever a defining keypoint is hidden.

    Tail segments reuse the limb rectangle construction: tail root ->
    proximal point, then proximal -> distal point.
    """
    crops = {"trunk": trunk_quad(keypoints, config)}
    for part in LIMB_PARTS:
        idx_a, idx_b = config.limb_keypoint_pairs[part]
        crops[part] = _segment_crop(keypoints, part, idx_a, idx_b, config.limb_ratio)
    crops["tail_proximal"] = _segment_crop(
        keypoints, "tail_proximal", config.tail_root_index, TAIL_PROXIMAL,
        config.limb_ratio)
    crops["tail_distal"] = _segment_crop(
        keypoints, "tail_distal", TAIL_PROXIMAL, TAIL_DISTAL, config.limb_ratio)
    return crops


def _convex_polys_intersect(poly_a: np.ndarray, poly_b: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons."""
    for poly in (poly_a, poly_b):
        edges = np.roll(poly, -1, axis=0) - poly
        for ex, ey in edges:
            axis = np.array([-ey, ex])
            pa = poly_a @ axis
            pb = poly_b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def extract_part(image: np.ndarray, crop: PartCrop, size: tuple[int, int]
                 ) -> tuple[Optional[np.ndarray], bool]:
    """Perspective-resample a part quad to (w, h); never fabricate pixels.

    Invalid crops pass through as (None, False) so downstream code applies
    the zero-embedding rule instead of feeding a black placeholder.  Quads
    partially outside the image are clamped with replicate padding; quads
    fully outside become invalid.
    """
    w, h = size
    if w <= 0 or h <= 0:
        raise ValueError(f"part size must be positive, got {size}")
    if not crop.valid:
        return None, False
    height, width = image.shape[:2]
    img_rect = np.array([[0, 0], [width, 0], [width, height], [0, height]],
                        dtype=np.float64)
    if not _convex_polys_intersect(crop.quad.corners, img_rect):
        return None, False

    # Map output pixel-area corners onto the quad corners; the +-0.5 shifts
    # keep the sampling grid consistent with plain cropping + cv2.resize.
    dst = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float32)
    src = crop.quad.corners.astype(np.float32)
    matrix = cv2.getPerspectiveTransform(dst, src)
    shift_in = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1]], dtype=np.float64)
    shift_out = np.array([[1, 0, -0.5], [0, 1, -0.5], [0, 0, 1]], dtype=np.float64)
    full = shift_out @ matrix.astype(np.float64) @ shift_in
    out = cv2.warpPerspective(
        image, full, (w, h),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_REPLICATE,
    )
    return out, True


_OVERLAY_COLORS = {
    "trunk": (255, 64, 64),
    "limb_fl": (64, 200, 64),
    "limb_fr": (64, 160, 255),
    "limb_bl": (255, 200, 0),
    "limb_br": (200, 64, 255),
    "tail_proximal": (0, 220, 220),
    "tail_distal": (255, 128, 0),
}


def draw_crops(image: np.ndarray, crops: Mapping[str, PartCrop],
               keypoints: Optional[KeypointSet] = None) -> np.ndarray:
    """Render part quads (and keypoints) on a copy of the image for audit."""
    canvas = image.copy()
    for part, crop in crops.items():
        if not crop.valid:
            continue
        pts = np.round(crop.quad.corners).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(canvas, [pts], isClosed=True,
                      color=_OVERLAY_COLORS.get(part, (255, 255, 255)),
                      thickness=2)
    if keypoints is not None:
        for i in keypoints.visible_indices():
            x, y = keypoints.xy(i)
            cv2.circle(canvas, (int(round(x)), int(round(y))), 3,
                       (255, 255, 255), -1)
    return canvas
