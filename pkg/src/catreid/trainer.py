"""PK batch sampling, the optimization loop, checkpointing and config.

Training is resumable and bit-reproducible: model init consumes one seeded
torch RNG draw, PK batches are a pure function of (seed, epoch), and every
augmentation seed derives from (seed, epoch, record index), so an
interrupted run continued from its checkpoint matches an uninterrupted one.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .augment import AugmentConfig
from .data import Dataset, PartitionSetting, derive_entities
from .geometry import PartConfig
from .inputs import part_config_for, record_inputs
from .losses import LossConfig, total_loss
from .network import PPGNetCat, StreamConfig, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending batch."""

    def __init__(self, message: str, batch_paths: list[str]):
        super().__init__(message)
        self.batch_paths = batch_paths


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_p: int = 4
    batch_k: int = 4
    learning_rate: float = 3.5e-4
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_decay_gamma: float = 0.1
    lr_decay_at: tuple[float, ...] = (0.6, 0.85)
    seed: int = 0
    partition: PartitionSetting = field(default_factory=PartitionSetting)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stream: dict = field(default_factory=dict)
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_p < 2 or self.batch_k < 2:
            raise ValueError("PK sampling needs P >= 2 and K >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "partition" in raw and isinstance(raw["partition"], dict):
            raw["partition"] = PartitionSetting(**raw["partition"])
        if "augment" in raw and isinstance(raw["augment"], dict):
            aug = dict(raw["augment"])
            for key in ("blur_sigma_range", "noise_std_range",
                        "erase_area_range", "erase_fill"):
                if isinstance(aug.get(key), list):
                    aug[key] = tuple(aug[key])
            raw["augment"] = AugmentConfig(**aug)
        if "loss" in raw and isinstance(raw["loss"], dict):
            raw["loss"] = LossConfig(**raw["loss"])
        if isinstance(raw.get("lr_decay_at"), list):
            raw["lr_decay_at"] = tuple(raw["lr_decay_at"])
        return cls(**raw)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "TrainConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)


def stable_seed(*parts) -> int:
    """Process-independent seed from arbitrary components."""
    digest = hashlib.blake2s("|".join(map(str, parts)).encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


def build_stream_config(stream: dict, num_entities: int) -> StreamConfig:
    stream = dict(stream)
    preset = stream.pop("preset", "reference")
    for key in ("full_image_size", "trunk_image_size", "limb_image_size"):
        if isinstance(stream.get(key), list):
            stream[key] = tuple(stream[key])
    if preset == "cpu_small":
        return StreamConfig.cpu_small(num_entities, **stream)
    if preset == "reference":
        return StreamConfig(num_entities=num_entities, **stream)
    raise ValueError(f"unknown stream preset {preset!r}")


def pk_sample(dataset: Dataset, p: int, k: int, seed: int, epoch: int = 0
              ) -> list[list[int]]:
    """One epoch of PK batches: P distinct entities x K record indices each.

    Entities with fewer than K images are sampled with replacement; every
    entity appears in at least one batch of the epoch; short final chunks
    are topped up with distinct extra entities.  Deterministic in
    (seed, epoch).
    """
    groups = dataset.records_by_entity()
    entities = sorted(groups)
    if len(entities) < p:
        raise ValueError(
            f"need at least P={p} entities, dataset has {len(entities)}")
    rng = np.random.default_rng([seed, epoch])
    order = list(entities)
    rng.shuffle(order)

    batches = []
    for start in range(0, len(order), p):
        chunk = order[start:start + p]
        if len(chunk) < p:
            others = [e for e in entities if e not in chunk]
            rng.shuffle(others)
            chunk = chunk + others[:p - len(chunk)]
        batch = []
        for entity in chunk:
            pool = groups[entity]
            if len(pool) >= k:
                picks = rng.choice(len(pool), size=k, replace=False)
            else:
                picks = rng.integers(0, len(pool), size=k)
            batch.extend(pool[i] for i in picks)
        batches.append(batch)
    return batches


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    epochs_run: int
    last_total: float


def _validation_rank1(model: PPGNetCat, val_set: Dataset,
                      stream: StreamConfig, image_root: str | Path) -> float:
    """Rank-1 of the current F-Stream on a validation split."""
    from .evaluate import evaluate_embeddings
    from .inputs import embed_records

    was_training = model.training
    model.eval()
    try:
        embeddings = embed_records(val_set.records, model.f_stream, stream,
                                   Path(image_root))
        entities = [val_set.entity_of[i] for i in range(len(val_set))]
        ids = [r.image_path for r in val_set.records]
        report = evaluate_embeddings(embeddings, entities, ids=ids)
        return report.rank1
    finally:
        if was_training:
            model.train()


_METRIC_COLUMNS = ["epoch", "step", "lr", "d_full_id", "d_full_triplet",
                   "z_ft_id", "z_ft_triplet", "z_fl_id", "z_fl_triplet",
                   "total"]


class _BatchBuilder:
    """Assembles network input tensors for record batches, caching rasters
    indirectly by letting cv2 re-read; tensors are built per epoch because
    augmentation parameters change."""

    def __init__(self, dataset: Dataset, image_root: Path,
                 stream: StreamConfig, part_config: PartConfig,
                 augment: Optional[AugmentConfig], seed: int):
        self.dataset = dataset
        self.image_root = image_root
        self.stream = stream
        self.part_config = part_config
        self.augment = augment
        self.seed = seed

    def build(self, indices: list[int], epoch: int) -> dict[str, torch.Tensor]:
        items = [
            record_inputs(
                self.dataset.records[i], self.image_root, self.stream,
                self.part_config, augment_config=self.augment,
                augment_seed=stable_seed(self.seed, epoch, i),
            )
            for i in indices
        ]
        return {
            "full": torch.stack([it["full"] for it in items]),
            "trunk": torch.stack([it["trunk"] for it in items]),
            "parts": torch.stack([it["parts"] for it in items]),
            "validity": torch.stack([it["validity"] for it in items]),
        }


def train(config: TrainConfig, train_set: Dataset, out_dir: str | Path,
          image_root: str | Path = ".",
          resume_from: Optional[str | Path] = None,
          forbidden_image_paths: Optional[set[str]] = None,
          stop_after_epochs: Optional[int] = None,
          val_set: Optional[Dataset] = None,
          val_image_root: Optional[str | Path] = None) -> TrainResult:
    """Run the optimization loop; writes checkpoint.pt and metrics.csv.

    ``forbidden_image_paths`` guards against test leakage: a training set
    containing any of those paths aborts immediately.  ``stop_after_epochs``
    ends the invocation early (simulating an interruption); continuing via
    ``resume_from`` reproduces an uninterrupted run exactly.  When a
    validation split is configured, the epoch with the best Rank-1 is kept
    as best_checkpoint.pt alongside the final one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_root = Path(image_root)

    if not train_set.entity_of:
        train_set = derive_entities(train_set, config.partition)
    entities = train_set.entities()
    if len(entities) < config.batch_p:
        raise ValueError(
            f"training needs at least P={config.batch_p} entities, "
            f"got {len(entities)}")
    label_of = {e: i for i, e in enumerate(entities)}

    if forbidden_image_paths:
        overlap = {r.image_path for r in train_set.records} \
            & set(forbidden_image_paths)
        if overlap:
            raise ValueError(
                f"{len(overlap)} training record(s) collide with the "
                f"held-out set, e.g. {sorted(overlap)[:3]}")

    torch.manual_seed(config.seed)
    stream = build_stream_config(config.stream, len(entities))
    part_config = part_config_for(stream, PartConfig(**config.geometry))
    model = PPGNetCat(stream)
    model.train()

    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay)
    milestones = sorted({max(1, int(round(f * config.epochs)))
                         for f in config.lr_decay_at})
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=milestones, gamma=config.lr_decay_gamma)

    if val_set is not None and not val_set.entity_of:
        val_set = derive_entities(val_set, config.partition)

    start_epoch = 0
    global_step = 0
    best_val_rank1 = float("-inf")
    if resume_from is not None:
        payload = torch.load(str(resume_from), map_location="cpu",
                             weights_only=False)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        scheduler.load_state_dict(payload["scheduler_state"])
        start_epoch = payload["epoch"]
        global_step = payload.get("global_step", 0)
        best_val_rank1 = payload.get("best_val_rank1", float("-inf"))

    builder = _BatchBuilder(train_set, image_root, stream, part_config,
                            config.augment, config.seed)
    weights = model.classifier_weights()

    metrics_path = out_dir / "metrics.csv"
    checkpoint_path = out_dir / "checkpoint.pt"
    mode = "a" if (resume_from is not None and metrics_path.exists()) else "w"
    metrics_file = open(metrics_path, mode, newline="")
    writer = csv.writer(metrics_file)
    if mode == "w":
        writer.writerow(_METRIC_COLUMNS)

    last_total = float("nan")
    end_epoch = config.epochs if stop_after_epochs is None \
        else min(config.epochs, start_epoch + stop_after_epochs)
    try:
        for epoch in range(start_epoch, end_epoch):
            batches = pk_sample(train_set, config.batch_p, config.batch_k,
                                config.seed, epoch)
            for batch_indices in batches:
                paths = [train_set.records[i].image_path
                         for i in batch_indices]
                tensors = builder.build(batch_indices, epoch)
                labels = torch.tensor(
                    [label_of[train_set.entity_of[i]] for i in batch_indices],
                    dtype=torch.long)

                optimizer.zero_grad()
                embeddings = model(tensors["full"], tensors["trunk"],
                                   tensors["parts"], tensors["validity"])
                breakdown = total_loss(embeddings, labels, weights,
                                       config.loss)
                if not torch.isfinite(breakdown.total):
                    dump = out_dir / "divergence.json"
                    with open(dump, "w") as fh:
                        json.dump({"epoch": epoch, "step": global_step,
                                   "batch": paths,
                                   "terms": breakdown.scalars()}, fh, indent=2)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {global_step}"
                        f" (diagnostics in {dump})", paths)
                breakdown.total.backward()
                optimizer.step()

                scalars = breakdown.scalars()
                writer.writerow([
                    epoch, global_step,
                    f"{optimizer.param_groups[0]['lr']:.8e}",
                    *(f"{scalars[c]:.8e}" for c in _METRIC_COLUMNS[3:])
                ])
                last_total = scalars["total"]
                global_step += 1
            scheduler.step()
            metrics_file.flush()

            if val_set is not None:
                rank1 = _validation_rank1(model, val_set, stream,
                                          val_image_root or image_root)
                if rank1 > best_val_rank1:
                    best_val_rank1 = rank1
                    save_checkpoint(out_dir / "best_checkpoint.pt", model,
                                    entities,
                                    partition=asdict(config.partition),
                                    extra={"epoch": epoch + 1,
                                           "val_rank1": rank1})

            save_checkpoint(
                checkpoint_path, model, entities,
                partition=asdict(config.partition),
                extra={
                    "optimizer_state": optimizer.state_dict(),
                    "scheduler_state": scheduler.state_dict(),
                    "epoch": epoch + 1,
                    "global_step": global_step,
                    "best_val_rank1": best_val_rank1,
                    "train_config": config.to_dict(),
                })
    finally:
        metrics_file.close()

    return TrainResult(checkpoint_path=checkpoint_path,
                       metrics_path=metrics_path,
                       epochs_run=end_epoch - start_epoch,
                       last_total=last_total)
