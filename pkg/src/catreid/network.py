"""PPGNet-Cat: full-image stream plus trunk and limbs/tail partial streams.

The full stream (F) embeds the whole crop; the trunk stream (TP) and the
limbs+tail stream (LP) act as regulators during training and are dropped at
inference.  Each stream projects pooled backbone features to a common
embedding width E, fused by plain elementwise addition:

    z_ft = d_full + d_trunk        z_fl = d_full + d_limbs

d_limbs concatenates four limb blocks and two half-width tail blocks
(4*limb + 2*tail = E).  A part marked invalid multiplies its projected
block by zero AFTER projection, so both the output block and the gradient
into that sub-network are exactly zero; black placeholder images would
instead leak batch-norm bias noise into the embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import torch
import torch.nn as nn

from .geometry import LIMB_PARTS, PART_NAMES, TAIL_PARTS

CHECKPOINT_FORMAT_VERSION = 1

_BACKBONE_DIMS = {
    "resnet18": 512,
    "resnet34": 512,
    "resnet50": 2048,
    "resnet101": 2048,
    "resnet152": 2048,
}


@dataclass(frozen=True)
class StreamConfig:
    """Architecture widths, backbones and expected input sizes (w, h)."""

    num_entities: int
    full_backbone: str = "resnet152"
    partial_backbone: str = "resnet34"
    embed_dim: int = 2560
    limb_embed_dim: int = 512
    tail_embed_dim: int = 256
    share_limb_backbones: bool = False
    full_image_size: tuple[int, int] = (256, 256)
    trunk_image_size: tuple[int, int] = (192, 96)
    limb_image_size: tuple[int, int] = (96, 96)
    full_pretrained_path: Optional[str] = None
    partial_pretrained_path: Optional[str] = None

    def __post_init__(self):
        for name in (self.full_backbone, self.partial_backbone):
            if name not in _BACKBONE_DIMS:
                raise ValueError(
                    f"unsupported backbone {name!r}; pick one of "
                    f"{sorted(_BACKBONE_DIMS)}"
                )
        if 4 * self.limb_embed_dim + 2 * self.tail_embed_dim != self.embed_dim:
            raise ValueError(
                "limb/tail widths must tile the embedding: need "
                f"4*{self.limb_embed_dim} + 2*{self.tail_embed_dim} == "
                f"{self.embed_dim}"
            )
        if self.tail_embed_dim * 2 != self.limb_embed_dim:
            raise ValueError("tail embedding must be half the limb embedding")
        if self.num_entities < 1:
            raise ValueError("num_entities must be at least 1")

    @classmethod
    def cpu_small(cls, num_entities: int, **overrides) -> "StreamConfig":
        """Reduced-resolution variant for desk-scale CPU training."""
        defaults = dict(
            num_entities=num_entities,
            full_backbone="resnet18",
            partial_backbone="resnet18",
            embed_dim=640,
            limb_embed_dim=128,
            tail_embed_dim=64,
            full_image_size=(96, 96),
            trunk_image_size=(96, 48),
            limb_image_size=(48, 48),
        )
        defaults.update(overrides)
        return cls(**defaults)


def weights_init_kaiming(m):
    classname = m.__class__.__name__
    if classname.find("Linear") != -1:
        nn.init.kaiming_normal_(m.weight, a=0, mode="fan_out")
        if m.bias is not None:
            nn.init.constant_(m.bias, 0.0)
    elif classname.find("BatchNorm") != -1:
        if m.affine:
            nn.init.constant_(m.weight, 1.0)
            nn.init.constant_(m.bias, 0.0)


def weights_init_classifier(m):
    if m.__class__.__name__.find("Linear") != -1:
        nn.init.normal_(m.weight, std=0.001)
        if m.bias is not None:
            nn.init.constant_(m.bias, 0.0)


def _build_backbone(name: str, pretrained_path: Optional[str] = None
                    ) -> tuple[nn.Module, int]:
    import torchvision.models as tvm

    net = getattr(tvm, name)(weights=None)
    dim = net.fc.in_features
    net.fc = nn.Identity()
    if pretrained_path:
        state = torch.load(pretrained_path, map_location="cpu",
                           weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        net.load_state_dict(state, strict=False)
    return net, dim


class _ProjectionHead(nn.Module):
    """Pooled backbone features -> fixed-width embedding (linear + BN)."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, out_dim)
        self.bn = nn.BatchNorm1d(out_dim)
        self.apply(weights_init_kaiming)

    def forward(self, x):
        return self.bn(self.proj(x))


class FullStream(nn.Module):
    """The inference-time model: backbone plus projection to E dims."""

    def __init__(self, config: StreamConfig):
        super().__init__()
        self.backbone, dim = _build_backbone(
            config.full_backbone, config.full_pretrained_path)
        self.head = _ProjectionHead(dim, config.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(images))


@dataclass
class EmbeddingSet:
    """Batched per-image embeddings of all streams plus fused vectors."""

    d_full: torch.Tensor
    d_trunk: torch.Tensor
    d_limbs: torch.Tensor
    z_ft: torch.Tensor
    z_fl: torch.Tensor
    part_validity: dict[str, torch.Tensor]


class PPGNetCat(nn.Module):
    """Training-time multi-stream model; see module docstring."""

    def __init__(self, config: StreamConfig):
        super().__init__()
        self.config = config
        self.f_stream = FullStream(config)

        self.trunk_backbone, pdim = _build_backbone(
            config.partial_backbone, config.partial_pretrained_path)
        self.trunk_head = _ProjectionHead(pdim, config.embed_dim)

        # One backbone per limb plus a single tail backbone shared by the
        # proximal/distal sub-networks (collapsible to one shared backbone).
        self.part_backbones = nn.ModuleDict()
        if config.share_limb_backbones:
            shared, _ = _build_backbone(config.partial_backbone,
                                        config.partial_pretrained_path)
            for part in LIMB_PARTS + TAIL_PARTS:
                self.part_backbones[part] = shared
        else:
            for part in LIMB_PARTS:
                self.part_backbones[part], _ = _build_backbone(
                    config.partial_backbone, config.partial_pretrained_path)
            tail_shared, _ = _build_backbone(
                config.partial_backbone, config.partial_pretrained_path)
            for part in TAIL_PARTS:
                self.part_backbones[part] = tail_shared

        self.part_heads = nn.ModuleDict()
        for part in LIMB_PARTS:
            self.part_heads[part] = _ProjectionHead(pdim, config.limb_embed_dim)
        for part in TAIL_PARTS:
            self.part_heads[part] = _ProjectionHead(pdim, config.tail_embed_dim)

        self.classifiers = nn.ModuleDict({
            head: nn.Linear(config.embed_dim, config.num_entities, bias=False)
            for head in ("d_full", "z_ft", "z_fl")
        })
        for cls in self.classifiers.values():
            weights_init_classifier(cls)

    # -- forward -----------------------------------------------------------

    def _check_shapes(self, full, trunk, parts, validity):
        fw, fh = self.config.full_image_size
        tw, th = self.config.trunk_image_size
        lw, lh = self.config.limb_image_size
        if tuple(full.shape[-2:]) != (fh, fw):
            raise ValueError(
                f"full images are {tuple(full.shape[-2:])}, expected {(fh, fw)}")
        if tuple(trunk.shape[-2:]) != (th, tw):
            raise ValueError(
                f"trunk images are {tuple(trunk.shape[-2:])}, expected {(th, tw)}")
        if parts.ndim != 5 or parts.shape[1] != 6 \
                or tuple(parts.shape[-2:]) != (lh, lw):
            raise ValueError(
                f"part images must be (B, 6, 3, {lh}, {lw}), got {tuple(parts.shape)}")
        if validity.shape != (full.shape[0], len(PART_NAMES)):
            raise ValueError(
                f"validity must be (B, {len(PART_NAMES)}), got {tuple(validity.shape)}")

    def forward(self, full: torch.Tensor, trunk: torch.Tensor,
                parts: torch.Tensor, validity: torch.Tensor) -> EmbeddingSet:
        """Embed a batch.

        ``parts`` stacks the six limb/tail crops in PART_NAMES[1:] order;
        ``validity`` is (B, 7) over PART_NAMES.  Invalid parts may carry any
        pixel content (conventionally zeros); their embedding blocks are
        forced to exact zeros.
        """
        self._check_shapes(full, trunk, parts, validity)
        valid = validity.to(full.dtype)

        d_full = self.f_stream(full)
        d_trunk = self.trunk_head(self.trunk_backbone(trunk)) * valid[:, 0:1]

        blocks = []
        part_validity = {"trunk": validity[:, 0].bool()}
        for i, part in enumerate(PART_NAMES[1:], start=1):
            feat = self.part_backbones[part](parts[:, i - 1])
            block = self.part_heads[part](feat) * valid[:, i:i + 1]
            blocks.append(block)
            part_validity[part] = validity[:, i].bool()
        d_limbs = torch.cat(blocks, dim=1)

        return EmbeddingSet(
            d_full=d_full,
            d_trunk=d_trunk,
            d_limbs=d_limbs,
            z_ft=d_full + d_trunk,
            z_fl=d_full + d_limbs,
            part_validity=part_validity,
        )

    def classifier_weights(self) -> dict[str, torch.Tensor]:
        return {head: cls.weight for head, cls in self.classifiers.items()}

    def limb_block_slices(self) -> dict[str, slice]:
        """Column ranges of each part's block inside d_limbs."""
        out, offset = {}, 0
        for part in PART_NAMES[1:]:
            width = self.config.limb_embed_dim if part in LIMB_PARTS \
                else self.config.tail_embed_dim
            out[part] = slice(offset, offset + width)
            offset += width
        return out


def forward_infer(model: FullStream, images: torch.Tensor) -> torch.Tensor:
    """Batch of full images -> batch of d_full embeddings, order-preserving."""
    with torch.no_grad():
        return model(images)


def param_count(model: nn.Module, mode: str = "training") -> int:
    """Learnable parameter count for the training or inference model."""
    if mode == "training":
        return sum(p.numel() for p in model.parameters() if p.requires_grad)
    if mode == "inference":
        target = model.f_stream if isinstance(model, PPGNetCat) else model
        return sum(p.numel() for p in target.parameters() if p.requires_grad)
    raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path: str | Path, model: PPGNetCat,
                    entity_labels: list[str],
                    partition: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Write a self-describing checkpoint (weights + config + vocabulary)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stream_config": asdict(model.config),
        "entity_labels": list(entity_labels),
        "partition": partition,
        "model_state": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, str(path))


def _read_checkpoint(path: str | Path) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {version!r} "
            f"(this build reads version {CHECKPOINT_FORMAT_VERSION})"
        )
    return payload


def load_training_model(path: str | Path) -> tuple[PPGNetCat, dict]:
    payload = _read_checkpoint(path)
    config = StreamConfig(**payload["stream_config"])
    model = PPGNetCat(config)
    model.load_state_dict(payload["model_state"])
    return model, payload


def load_inference_model(path: str | Path) -> tuple[FullStream, dict]:
    """Build the lightweight F-Stream model from any checkpoint.

    Succeeds whether or not partial-stream weights are present; fails if
    the F-Stream weights themselves are missing.
    """
    payload = _read_checkpoint(path)
    config = StreamConfig(**payload["stream_config"])
    prefix = "f_stream."
    state = {k[len(prefix):]: v for k, v in payload["model_state"].items()
             if k.startswith(prefix)}
    if not state:
        raise ValueError(f"checkpoint {path} holds no F-Stream weights")
    model = FullStream(config)
    model.load_state_dict(state)
    model.eval()
    return model, payload


def strip_to_inference(payload: dict) -> dict:
    """Drop partial-stream weights, keeping only what inference loads."""
    slim = dict(payload)
    slim["model_state"] = {
        k: v for k, v in payload["model_state"].items()
        if k.startswith("f_stream.")
    }
    return slim
