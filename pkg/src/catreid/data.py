"""Manifest loading, entity derivation and cat-level train/test splitting.

A manifest is a JSON-lines file, one annotated camera-trap image per line.
Schema (see ``docs/manifest.schema.json``)::

    {
      "image_path":   "images/cat01_0003.png",
      "cat_id":       "cat01",
      "side":         "left" | "right" | "unknown",
      "time_of_day":  "day" | "night",          # optional if capture_time given
      "capture_time": "2023-05-01T22:14:03",    # optional ISO-8601 timestamp
      "camera_id":    "cam3",
      "bbox":         [x, y, w, h],             # optional if a side-car exists
      "keypoints":    [[x, y, v], ...]          # up to 17 entries
    }

Keypoint indices 0-14 follow the ATRW body-joint layout; index 15 is the
proximal tail and 16 the distal tail.  Missing trailing entries are padded
as invisible.  A record without a "bbox" field may instead ship a detector
side-car ``<image_path>.bbox.json`` containing ``{"bbox": [x, y, w, h]}``
(output of any external detector; running one is out of scope here).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

NUM_KEYPOINTS = 17
TAIL_PROXIMAL = 15
TAIL_DISTAL = 16

SIDES = ("left", "right", "unknown")
TIMES_OF_DAY = ("day", "night")

# Local-time window used to derive day/night when the manifest carries a
# capture_time but no explicit time_of_day field.
DEFAULT_DAY_WINDOW = (6, 18)


class ManifestError(ValueError):
    """Raised when a manifest line violates the record schema."""


@dataclass(frozen=True)
class KeypointSet:
    """Exactly 17 (x, y, visible) entries, invisible ones padded in."""

    points: tuple[tuple[float, float, bool], ...]

    def __post_init__(self):
        if len(self.points) != NUM_KEYPOINTS:
            raise ValueError(
                f"expected {NUM_KEYPOINTS} keypoints, got {len(self.points)}"
            )

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "KeypointSet":
        """Build from up-to-17 [x, y, v] rows, padding the tail as invisible."""
        if len(rows) > NUM_KEYPOINTS:
            raise ValueError(f"too many keypoints: {len(rows)} > {NUM_KEYPOINTS}")
        pts = []
        for row in rows:
            if len(row) != 3:
                raise ValueError(f"keypoint row must be [x, y, v], got {row!r}")
            x, y, v = row
            pts.append((float(x), float(y), bool(v)))
        while len(pts) < NUM_KEYPOINTS:
            pts.append((0.0, 0.0, False))
        return cls(tuple(pts))

    def visible(self, index: int) -> bool:
        return self.points[index][2]

    def xy(self, index: int) -> tuple[float, float]:
        return self.points[index][0], self.points[index][1]

    def visible_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.points) if p[2]]


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    cat_id: str
    side: str
    camera_id: str
    bbox: tuple[float, float, float, float]
    keypoints: KeypointSet
    time_of_day: Optional[str] = None
    capture_time: Optional[datetime] = None


@dataclass(frozen=True)
class PartitionSetting:
    """Which attributes split a cat into entities (the four legal combos)."""

    use_side: bool = True
    use_time: bool = True

    def describe(self) -> str:
        parts = ["cat"]
        if self.use_side:
            parts.append("side")
        if self.use_time:
            parts.append("time")
        return "+".join(parts)


@dataclass
class Dataset:
    """Validated records plus (after derive_entities) their entity labels.

    ``entity_of`` maps record index -> entity label.  Labels are
    deterministic strings built from the observed key tuple, so the entity
    partition does not depend on record order.
    """

    records: list[ImageRecord]
    entity_of: dict[int, str] = field(default_factory=dict)
    partition: Optional[PartitionSetting] = None

    def __len__(self) -> int:
        return len(self.records)

    def entities(self) -> list[str]:
        return sorted(set(self.entity_of.values()))

    def cats(self) -> list[str]:
        return sorted({r.cat_id for r in self.records})

    def records_by_entity(self) -> dict[str, list[int]]:
        groups: dict[str, list[int]] = {}
        for idx in range(len(self.records)):
            label = self.entity_of.get(idx)
            if label is not None:
                groups.setdefault(label, []).append(idx)
        return groups


def entity_label(record: ImageRecord, setting: PartitionSetting) -> str:
    parts = [record.cat_id]
    if setting.use_side:
        parts.append(record.side)
    if setting.use_time:
        parts.append(record.time_of_day or "?")
    return "|".join(parts)


def _parse_bbox(raw, line_no: int) -> tuple[float, float, float, float]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ManifestError(f"line {line_no}: bbox must be [x, y, w, h], got {raw!r}")
    x, y, w, h = (float(v) for v in raw)
    if w <= 0 or h <= 0:
        raise ManifestError(f"line {line_no}: bbox must have w > 0 and h > 0")
    if x < 0 or y < 0:
        raise ManifestError(f"line {line_no}: bbox origin must be non-negative")
    return (x, y, w, h)


def _sidecar_bbox(image_path: str, base_dir: Path) -> Optional[list]:
    sidecar = base_dir / (image_path + ".bbox.json")
    if not sidecar.is_file():
        return None
    with open(sidecar) as fh:
        payload = json.load(fh)
    return payload.get("bbox")


def _parse_record(obj: dict, line_no: int, base_dir: Path,
                  day_window: tuple[int, int]) -> ImageRecord:
    for key in ("image_path", "cat_id", "side", "camera_id"):
        if key not in obj:
            raise ManifestError(f"line {line_no}: missing required field '{key}'")
    side = obj["side"]
    if side not in SIDES:
        raise ManifestError(f"line {line_no}: side must be one of {SIDES}, got {side!r}")

    bbox_raw = obj.get("bbox")
    if bbox_raw is None:
        bbox_raw = _sidecar_bbox(obj["image_path"], base_dir)
    if bbox_raw is None:
        raise ManifestError(
            f"line {line_no}: record has no bbox and no detector side-car "
            "(detection is out of scope; boxes must be provided)"
        )
    bbox = _parse_bbox(bbox_raw, line_no)

    try:
        keypoints = KeypointSet.from_rows(obj.get("keypoints", []))
    except ValueError as exc:
        raise ManifestError(f"line {line_no}: {exc}") from None

    x0, y0, w, h = bbox
    for i in keypoints.visible_indices():
        kx, ky = keypoints.xy(i)
        if not (x0 <= kx <= x0 + w and y0 <= ky <= y0 + h):
            raise ManifestError(
                f"line {line_no}: visible keypoint {i} at ({kx}, {ky}) "
                f"lies outside bbox {bbox}"
            )

    capture_time = None
    if obj.get("capture_time"):
        try:
            capture_time = datetime.fromisoformat(obj["capture_time"])
        except ValueError:
            raise ManifestError(
                f"line {line_no}: capture_time is not ISO-8601: "
                f"{obj['capture_time']!r}"
            ) from None

    time_of_day = obj.get("time_of_day")
    if time_of_day is not None and time_of_day not in TIMES_OF_DAY:
        raise ManifestError(
            f"line {line_no}: time_of_day must be one of {TIMES_OF_DAY}"
        )
    if time_of_day is None and capture_time is not None:
        start, end = day_window
        time_of_day = "day" if start <= capture_time.hour < end else "night"

    return ImageRecord(
        image_path=obj["image_path"],
        cat_id=str(obj["cat_id"]),
        side=side,
        camera_id=str(obj["camera_id"]),
        bbox=bbox,
        keypoints=keypoints,
        time_of_day=time_of_day,
        capture_time=capture_time,
    )


def load_manifest(path: str | Path, skip_invalid: bool = False,
                  day_window: tuple[int, int] = DEFAULT_DAY_WINDOW) -> Dataset:
    """Parse and validate a JSON-lines manifest into a Dataset.

    Invalid lines raise ManifestError naming the line number, or are
    collected and reported as warnings when ``skip_invalid`` is set.
    Relative image paths are interpreted against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base_dir = path.parent

    records: list[ImageRecord] = []
    errors: list[str] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                err = f"line {line_no}: not valid JSON ({exc.msg})"
                if not skip_invalid:
                    raise ManifestError(err) from None
                errors.append(err)
                continue
            try:
                records.append(_parse_record(obj, line_no, base_dir, day_window))
            except ManifestError as exc:
                if not skip_invalid:
                    raise
                errors.append(str(exc))

    if errors:
        warnings.warn(
            f"skipped {len(errors)} invalid manifest line(s): "
            + "; ".join(errors[:5])
            + ("; ..." if len(errors) > 5 else "")
        )
    return Dataset(records=records)


def drop_unpartitionable(dataset: Dataset) -> tuple[Dataset, int]:
    """Remove records that cannot enter training/eval sets.

    Drops side=unknown records (front/back views are not identifiable from
    pelage) and records with no usable day/night information.  Returns the
    filtered dataset and the number of dropped records.
    """
    kept = [r for r in dataset.records
            if r.side != "unknown" and r.time_of_day is not None]
    return Dataset(records=kept), len(dataset.records) - len(kept)


def dedup_sequences(dataset: Dataset, min_gap_seconds: float = 2.0) -> Dataset:
    """Drop near-duplicate burst frames from capture sequences.

    Within each (camera_id, cat_id) group, ordered by capture_time, a record
    closer than ``min_gap_seconds`` to the previously kept one is dropped.
    Records without capture_time are always kept.
    """
    groups: dict[tuple[str, str], list[tuple[datetime, int]]] = {}
    keep = set(range(len(dataset.records)))
    for idx, rec in enumerate(dataset.records):
        if rec.capture_time is None:
            continue
        groups.setdefault((rec.camera_id, rec.cat_id), []).append(
            (rec.capture_time, idx)
        )
    for timeline in groups.values():
        timeline.sort()
        last_kept: Optional[datetime] = None
        for ts, idx in timeline:
            if last_kept is not None and (ts - last_kept).total_seconds() < min_gap_seconds:
                keep.discard(idx)
            else:
                last_kept = ts
    kept = [rec for idx, rec in enumerate(dataset.records) if idx in keep]
    return Dataset(records=kept)


def derive_entities(dataset: Dataset, setting: PartitionSetting) -> Dataset:
    """Label every record with its entity under the given partition setting.

    Entities exist only for observed (cat, side?, time?) combinations, never
    the full Cartesian product.  Requires side and time_of_day on every
    record; use drop_unpartitionable first.
    """
    for idx, rec in enumerate(dataset.records):
        if rec.side == "unknown":
            raise ValueError(
                f"record {idx} ({rec.image_path}) has side=unknown; "
                "filter with drop_unpartitionable before deriving entities"
            )
        if rec.time_of_day is None:
            raise ValueError(
                f"record {idx} ({rec.image_path}) has no day/night information"
            )
    entity_of = {
        idx: entity_label(rec, setting) for idx, rec in enumerate(dataset.records)
    }
    return Dataset(records=list(dataset.records), entity_of=entity_of,
                   partition=setting)


def split_train_test(dataset: Dataset, ratio: float, seed: int
                     ) -> tuple[Dataset, Dataset]:
    """Split at cat level so no physical animal spans both sides.

    ``ratio`` is the train fraction of cats (0.6 reproduces a 6/4 split of
    10 cats).  Entity labels are re-derived on each side when the input has
    a partition setting.  Deterministic under ``seed``.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    cats = dataset.cats()
    if len(cats) < 2:
        raise ValueError("need at least 2 cats to split")

    import random

    rng = random.Random(seed)
    shuffled = list(cats)
    rng.shuffle(shuffled)
    n_train = round(ratio * len(cats))
    if n_train == 0 or n_train == len(cats):
        raise ValueError(
            f"ratio {ratio} with {len(cats)} cats leaves one side empty"
        )
    train_cats = set(shuffled[:n_train])

    train_records = [r for r in dataset.records if r.cat_id in train_cats]
    test_records = [r for r in dataset.records if r.cat_id not in train_cats]
    train = Dataset(records=train_records)
    test = Dataset(records=test_records)
    if dataset.partition is not None:
        train = derive_entities(train, dataset.partition)
        test = derive_entities(test, dataset.partition)
    return train, test


def record_to_json(record: ImageRecord) -> dict:
    """Inverse of manifest parsing, for writing split manifests back out."""
    obj = {
        "image_path": record.image_path,
        "cat_id": record.cat_id,
        "side": record.side,
        "camera_id": record.camera_id,
        "bbox": list(record.bbox),
        "keypoints": [[x, y, int(v)] for x, y, v in record.keypoints.points],
    }
    if record.time_of_day is not None:
        obj["time_of_day"] = record.time_of_day
    if record.capture_time is not None:
        obj["capture_time"] = record.capture_time.isoformat()
    return obj


def write_manifest(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in dataset.records:
            fh.write(json.dumps(record_to_json(rec)) + "\n")
