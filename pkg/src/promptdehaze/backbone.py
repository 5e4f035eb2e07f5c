"""Backbone-agnostic dehazing model interface, a tiny reference residual
CNN for desk-scale experiments, a backbone registry, and checkpointing.

Any spatial-dimension-preserving torch module with a ``forward_t`` tensor
method can serve as the dehazing network; adapters around external
architectures register themselves by name.  During loss computation
outputs are passed through unclamped (clamping kills gradients at
saturation); clamping to [0, 1] happens only when exporting images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .encoders import as_chw_tensor, tensor_to_image
from .imaging import Image

CHECKPOINT_MAGIC = "promptdehaze.checkpoint"
CHECKPOINT_VERSION = 1
STAGES = ("pretrained", "finetuned")


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, corrupt, or version-incompatible."""


class DehazeModel(nn.Module):
    """Interface: (3, H, W) -> (3, H, W), same spatial size, unclamped."""

    name = "base"
    config: dict = {}
    stride_factor = 1
    min_side = 16

    def forward_t(self, x: torch.Tensor) -> torch.Tensor:
        """Tensor forward used by losses and training; alias of forward."""
        return self(x)

    def dehaze_image(self, image: Image) -> Image:
        """Inference on an Image, clamped to [0, 1]."""
        with torch.no_grad():
            return tensor_to_image(self.forward_t(as_chw_tensor(image)))

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "config": dict(self.config),
            "stride_factor": self.stride_factor,
            "min_side": self.min_side,
            "parameters": sum(p.numel() for p in self.parameters()),
        }


class TinyResidualDehazer(DehazeModel):
    """Small residual CNN predicting an additive correction.

    output = input + final(body(tanh(head(input)))).  With the final conv
    zero-initialized (the default) the network is the identity map, which
    keeps early fine-tuning anchored and makes the zero-fidelity case
    testable exactly.  Activations are tanh so the whole map is smooth,
    which finite-difference gradient checks rely on.
    """

    name = "tiny"

    def __init__(self, channels: int = 16, blocks: int = 2, seed: int = 0,
                 zero_init_final: bool = True):
        super().__init__()
        if channels < 8:
            raise ValueError(f"channels must be >= 8, got {channels}")
        if blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {blocks}")
        self.config = {
            "channels": int(channels),
            "blocks": int(blocks),
            "seed": int(seed),
            "zero_init_final": bool(zero_init_final),
        }
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.head = nn.Conv2d(3, channels, 3, padding=1)
            self.body = nn.ModuleList(
                nn.Conv2d(channels, channels, 3, padding=1) for _ in range(blocks)
            )
            self.final = nn.Conv2d(channels, 3, 3, padding=1)
        if zero_init_final:
            with torch.no_grad():
                self.final.weight.zero_()
                self.final.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) input, got {tuple(x.shape)}")
        h = torch.tanh(self.head(x.unsqueeze(0)))
        for conv in self.body:
            h = torch.tanh(conv(h))
        return x + self.final(h).squeeze(0)


_BACKBONES: dict = {}


def register_backbone(name: str, factory) -> None:
    """Register a backbone factory under a unique config name."""
    if name in _BACKBONES:
        raise ValueError(f"backbone {name!r} is already registered")
    _BACKBONES[name] = factory


def build_backbone(name: str, **config) -> DehazeModel:
    factory = _BACKBONES.get(name)
    if factory is None:
        raise LookupError(
            f"unknown backbone {name!r}; registered: {sorted(_BACKBONES)}"
        )
    return factory(**config)


def tiny_backbone(channels: int = 16, blocks: int = 2, seed: int = 0,
                  zero_init_final: bool = True) -> TinyResidualDehazer:
    return TinyResidualDehazer(channels, blocks, seed, zero_init_final)


register_backbone("tiny", tiny_backbone)


@dataclass
class Checkpoint:
    """A model plus everything needed to rebuild and audit it."""

    model: DehazeModel
    stage: str
    encoder_metadata: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")

    def save(self, path) -> None:
        save_checkpoint(self, path)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_MAGIC,
        "version": checkpoint.version,
        "stage": checkpoint.stage,
        "backbone_name": checkpoint.model.name,
        "backbone_config": dict(checkpoint.model.config),
        "state_dict": checkpoint.model.state_dict(),
        "encoder_metadata": dict(checkpoint.encoder_metadata),
        "train_config": dict(checkpoint.train_config),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_MAGIC} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        model = build_backbone(payload["backbone_name"], **payload["backbone_config"])
        model.load_state_dict(payload["state_dict"], strict=True)
    except (KeyError, LookupError, RuntimeError) as exc:
        raise CheckpointError(f"cannot rebuild model from {path}: {exc}") from exc
    return Checkpoint(
        model=model,
        stage=payload["stage"],
        encoder_metadata=payload.get("encoder_metadata", {}),
        train_config=payload.get("train_config", {}),
        version=payload["version"],
    )
