"""Record -> network input tensors: crop, augment, extract parts, normalize.

Augmentation (training only) happens on the full bbox crop BEFORE part
extraction, with keypoints pushed through the same geometric transforms, so
every stream sees the same degradation.  Invalid parts become zero tensors;
the network masks their embeddings to exact zeros regardless of content.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch

from .augment import AugmentConfig, augment_with_points
from .data import ImageRecord, KeypointSet
from .geometry import PART_NAMES, PartConfig, extract_part, part_crops
from .network import FullStream, StreamConfig

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def load_rgb(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def crop_bbox(image: np.ndarray, bbox) -> tuple[np.ndarray, tuple[int, int]]:
    """Integer bbox crop clamped to image bounds; returns crop and origin."""
    height, width = image.shape[:2]
    x, y, w, h = bbox
    x0 = int(np.clip(np.floor(x), 0, width - 1))
    y0 = int(np.clip(np.floor(y), 0, height - 1))
    x1 = int(np.clip(np.ceil(x + w), x0 + 1, width))
    y1 = int(np.clip(np.ceil(y + h), y0 + 1, height))
    return image[y0:y1, x0:x1].copy(), (x0, y0)


def to_tensor(raster: np.ndarray, size: tuple[int, int]) -> torch.Tensor:
    """Resize to (w, h), scale to [0, 1], ImageNet-normalize, CHW float32."""
    w, h = size
    if raster.shape[1] != w or raster.shape[0] != h:
        raster = cv2.resize(raster, (w, h), interpolation=cv2.INTER_LINEAR)
    arr = raster.astype(np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def part_config_for(stream: StreamConfig, base: Optional[PartConfig] = None
                    ) -> PartConfig:
    """PartConfig whose crop sizes match the network's expected inputs."""
    base = base or PartConfig()
    return PartConfig(
        limb_ratio=base.limb_ratio,
        trunk_padding=base.trunk_padding,
        limb_image_size=stream.limb_image_size,
        trunk_image_size=stream.trunk_image_size,
        limb_keypoint_pairs=dict(base.limb_keypoint_pairs),
        trunk_keypoint_set=base.trunk_keypoint_set,
        front_anchor_set=base.front_anchor_set,
        rear_anchor_set=base.rear_anchor_set,
        tail_root_index=base.tail_root_index,
    )


def record_inputs(record: ImageRecord, image_root: Path,
                  stream: StreamConfig, part_config: PartConfig,
                  augment_config: Optional[AugmentConfig] = None,
                  augment_seed: int = 0) -> dict[str, torch.Tensor]:
    """Build the (full, trunk, parts, validity) tensors for one record."""
    image = load_rgb(Path(image_root) / record.image_path)
    crop, (x0, y0) = crop_bbox(image, record.bbox)

    pts = np.array([[p[0] - x0, p[1] - y0] for p in record.keypoints.points],
                   dtype=np.float64)
    vis = [p[2] for p in record.keypoints.points]

    if augment_config is not None:
        crop, pts = augment_with_points(crop, pts, augment_config, augment_seed)

    keypoints = KeypointSet(tuple(
        (float(x), float(y), v) for (x, y), v in zip(pts, vis)
    ))
    crops = part_crops(keypoints, part_config)

    full = to_tensor(crop, stream.full_image_size)

    trunk_raster, trunk_ok = extract_part(crop, crops["trunk"],
                                          stream.trunk_image_size)
    tw, th = stream.trunk_image_size
    trunk = to_tensor(trunk_raster, stream.trunk_image_size) if trunk_ok \
        else torch.zeros(3, th, tw)

    lw, lh = stream.limb_image_size
    part_tensors, validity = [], [1.0 if trunk_ok else 0.0]
    for part in PART_NAMES[1:]:
        raster, ok = extract_part(crop, crops[part], stream.limb_image_size)
        part_tensors.append(to_tensor(raster, stream.limb_image_size) if ok
                            else torch.zeros(3, lh, lw))
        validity.append(1.0 if ok else 0.0)

    return {
        "full": full,
        "trunk": trunk,
        "parts": torch.stack(part_tensors),
        "validity": torch.tensor(validity, dtype=torch.float32),
    }


def embed_records(records: Sequence[ImageRecord], model: FullStream,
                  stream: StreamConfig, image_root: Path,
                  batch_size: int = 32) -> np.ndarray:
    """Inference embeddings for a record sequence, order-preserving."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start:start + batch_size]
            tensors = []
            for rec in batch:
                image = load_rgb(Path(image_root) / rec.image_path)
                crop, _ = crop_bbox(image, rec.bbox)
                tensors.append(to_tensor(crop, stream.full_image_size))
            chunks.append(model(torch.stack(tensors)).cpu().numpy())
    if not chunks:
        return np.zeros((0, stream.embed_dim), dtype=np.float32)
    return np.concatenate(chunks, axis=0)
