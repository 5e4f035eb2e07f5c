"""Two-stage training driver.

Stage 1 (``pretrain``) fits the backbone to synthetic (hazy, clean) pairs
with pixelwise L1.  Stage 2 (``finetune``) adapts the pretrained model to
unlabeled hazy images by minimizing the prompt-guided total loss; the
encoder stays frozen throughout and sky masks are precomputed once.

Both stages use the Lion optimizer (sign momentum updates) under cosine
annealing by default.  Full-scale defaults are 200 pretrain epochs and
15 fine-tune epochs at lr 3e-5; the ``toy_*_config`` presets shrink the
schedule and raise the learning rate so the shipped desk-scale runs move
the tiny backbone measurably (sign updates bound each parameter's step to
exactly lr, so 3e-5 cannot cross the toy loss landscape in 15 epochs).
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import Checkpoint, build_backbone
from .encoders import as_chw_tensor
from .losses import DEFAULT_FILL, LossWeights, clip_prompt_loss, composite_tensor, total_loss
from .prompts import build_default_prompt_sets, ensemble_embedding
from .regions import build_mask_cache

STAGES = ("pretrain", "finetune")
OPTIMIZERS = ("lion", "adamw")


class Lion(torch.optim.Optimizer):
    """Sign-momentum optimizer: update = sign(b1*m + (1-b1)*g).

    Momentum is the slower EMA m <- b2*m + (1-b2)*g; weight decay is
    decoupled.  Each parameter moves by exactly +-lr per step.
    """

    def __init__(self, params, lr: float = 3e-5, betas=(0.9, 0.99),
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not all(0.0 <= b < 1.0 for b in betas) or len(betas) != 2:
            raise ValueError(f"betas must be two values in [0, 1), got {betas}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        super().__init__(params, dict(lr=lr, betas=betas, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            wd = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "momentum" not in state:
                    state["momentum"] = torch.zeros_like(p)
                m = state["momentum"]
                update = (beta1 * m + (1.0 - beta1) * p.grad).sign()
                if wd != 0.0:
                    p.mul_(1.0 - lr * wd)
                p.add_(update, alpha=-lr)
                m.mul_(beta2).add_(p.grad, alpha=1.0 - beta2)
        return loss


@dataclass
class TrainConfig:
    """One stage's optimization settings.

    ``t_max`` is the cosine schedule horizon in optimizer steps; left as
    None it resolves to (total steps - 1) when a run starts.
    """

    stage: str
    epochs: int
    optimizer: str = "lion"
    lr0: float = 3e-5
    eta_min: float = 0.0
    t_max: int | None = None
    batch: int = 8
    seed: int = 0
    weight_decay: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: str = "tiny"
    backbone_kwargs: dict = field(default_factory=dict)
    region_split: bool = True
    enhance_set: bool = True
    region_mode: str = "mask-output"
    orientation: str = "neg-log-pos"
    temperature: float = 1.0
    fill: tuple = DEFAULT_FILL

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.eta_min <= self.lr0:
            raise ValueError(f"eta_min must lie in [0, lr0], got {self.eta_min}")

    def as_dict(self) -> dict:
        return asdict(self)


def pretrain_config(**overrides) -> TrainConfig:
    """Full-scale pretraining defaults: 200 epochs, Lion, lr0 3e-5."""
    return TrainConfig(stage="pretrain", epochs=200, **overrides)


def finetune_config(**overrides) -> TrainConfig:
    """Full-scale fine-tuning defaults: 15 epochs, Lion, lr0 3e-5."""
    return TrainConfig(stage="finetune", epochs=15, **overrides)


def toy_pretrain_config(seed: int = 0, **overrides) -> TrainConfig:
    """Desk-scale preset tuned on the shipped seeded toy corpus."""
    overrides.setdefault("epochs", 50)
    overrides.setdefault("lr0", 2e-3)
    overrides.setdefault("batch", 8)
    overrides.setdefault("backbone_kwargs", {"channels": 16, "blocks": 2, "seed": seed})
    return TrainConfig(stage="pretrain", seed=seed, **overrides)


def toy_finetune_config(seed: int = 0, **overrides) -> TrainConfig:
    """Desk-scale preset tuned on the shipped seeded toy corpus.

    The sign optimizer moves every weight by the full learning rate each
    step, so lr0 directly bounds how far 15 epochs can push the model;
    6e-5 lands where prompt losses and the haze proxy drop clearly while
    outputs stay close to the supervised restoration.
    """
    overrides.setdefault("epochs", 15)
    overrides.setdefault("lr0", 6e-5)
    overrides.setdefault("batch", 4)
    return TrainConfig(stage="finetune", seed=seed, **overrides)


@dataclass
class TrainRecord:
    """Per-step loss stream plus per-epoch aggregates and run metadata."""

    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint_paths: list = field(default_factory=list)

    def to_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for row in self.steps:
                fh.write(json.dumps({"kind": "step", **row}) + "\n")
            for row in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **row}) + "\n")
            fh.write(json.dumps({"kind": "summary", "wall_clock": self.wall_clock}) + "\n")


def lr_at(step: int, config: TrainConfig) -> float:
    """Cosine annealing: eta_min + 0.5*(lr0 - eta_min)*(1 + cos(pi*step/t_max))."""
    if config.t_max is None:
        raise ValueError("config.t_max is unresolved; set it or start a run")
    if not 0 <= step <= config.t_max:
        raise ValueError(f"step {step} outside [0, {config.t_max}]")
    span = config.lr0 - config.eta_min
    return config.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * step / config.t_max))


def _resolve_t_max(config: TrainConfig, n_samples: int) -> TrainConfig:
    if config.t_max is not None:
        return config
    steps_per_epoch = math.ceil(n_samples / config.batch)
    return replace(config, t_max=max(config.epochs * steps_per_epoch - 1, 1))


def _make_optimizer(model, config: TrainConfig):
    if config.optimizer == "lion":
        return Lion(model.parameters(), lr=config.lr0, weight_decay=config.weight_decay)
    return torch.optim.AdamW(
        model.parameters(), lr=config.lr0, weight_decay=config.weight_decay
    )


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def encoder_checksum(encoder) -> str:
    return encoder.checksum()


def pretrain(config: TrainConfig, pairs) -> tuple[Checkpoint, TrainRecord]:
    """Supervised L1 pretraining on aligned (hazy, clean) pairs."""
    if config.stage != "pretrain":
        raise ValueError(f"config.stage must be 'pretrain', got {config.stage!r}")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("pretraining dataset is empty")
    t0 = time.perf_counter()
    torch.manual_seed(config.seed)
    model = build_backbone(config.backbone, **config.backbone_kwargs)
    data = [(as_chw_tensor(h), as_chw_tensor(c)) for h, c in pairs]
    for h, c in data:
        if h.shape != c.shape:
            raise ValueError("paired samples must have identical shapes")
    config = _resolve_t_max(config, len(data))
    optimizer = _make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    record = TrainRecord()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        for start in range(0, len(data), config.batch):
            batch = order[start:start + config.batch]
            lr = lr_at(min(step, config.t_max), config)
            _set_lr(optimizer, lr)
            optimizer.zero_grad()
            loss = torch.stack(
                [(model.forward_t(data[i][0]) - data[i][1]).abs().mean() for i in batch]
            ).mean()
            loss.backward()
            optimizer.step()
            val = float(loss.detach())
            record.steps.append(
                {"stage": "pretrain", "step": step, "epoch": epoch, "lr": lr, "l1": val}
            )
            epoch_losses.append(val)
            step += 1
        record.epochs.append(
            {"epoch": epoch, "l1": float(np.mean(epoch_losses)) if epoch_losses else 0.0}
        )
    record.wall_clock = time.perf_counter() - t0
    checkpoint = Checkpoint(model=model, stage="pretrained", train_config=config.as_dict())
    return checkpoint, record


def finetune(
    config: TrainConfig,
    images,
    checkpoint: Checkpoint,
    encoder,
    prompt_sets=None,
    masks=None,
) -> tuple[Checkpoint, TrainRecord]:
    """Prompt-guided adaptation of a pretrained checkpoint on unlabeled images.

    The encoder is frozen (nothing here touches its constants or weights);
    sky masks are taken from ``masks`` or precomputed once up front.
    Ablations: ``config.region_split=False`` scores the non-sky prompt set
    on the whole image and zeroes the sky term; ``config.enhance_set=False``
    zeroes the enhance term.
    """
    if config.stage != "finetune":
        raise ValueError(f"config.stage must be 'finetune', got {config.stage!r}")
    if checkpoint.stage != "pretrained":
        raise ValueError(
            f"fine-tuning requires a stage='pretrained' checkpoint, got {checkpoint.stage!r}"
        )
    images = list(images)
    if not images:
        raise ValueError("fine-tuning corpus is empty")
    t0 = time.perf_counter()
    torch.manual_seed(config.seed)
    model = copy.deepcopy(checkpoint.model)
    sets = prompt_sets if prompt_sets is not None else build_default_prompt_sets()
    ensembles = {role: ensemble_embedding(ps, encoder) for role, ps in sets.items()}
    if masks is None:
        masks = build_mask_cache(images, encoder)
    if len(masks) != len(images):
        raise ValueError(f"{len(masks)} masks for {len(images)} images")
    data = [as_chw_tensor(im) for im in images]
    config = _resolve_t_max(config, len(data))
    optimizer = _make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    record = TrainRecord()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        epoch_totals = []
        for start in range(0, len(data), config.batch):
            batch = order[start:start + config.batch]
            lr = lr_at(min(step, config.t_max), config)
            _set_lr(optimizer, lr)
            optimizer.zero_grad()
            breakdowns = [
                total_loss(
                    data[i], masks[i], model, ensembles, encoder, config.weights,
                    region_mode=config.region_mode,
                    region_split=config.region_split,
                    enhance_set=config.enhance_set,
                    orientation=config.orientation,
                    temperature=config.temperature,
                    fill=config.fill,
                )
                for i in batch
            ]
            batch_total = torch.stack([b.total for b in breakdowns]).mean()
            batch_total.backward()
            optimizer.step()
            means = {
                key: float(np.mean([b.as_floats()[key] for b in breakdowns]))
                for key in ("total", "guidance", "fidelity", "sky", "non_sky", "enhance")
            }
            record.steps.append(
                {"stage": "finetune", "step": step, "epoch": epoch, "lr": lr, **means}
            )
            epoch_totals.append(means["total"])
            step += 1
        record.epochs.append(
            {"epoch": epoch, "total": float(np.mean(epoch_totals)) if epoch_totals else 0.0}
        )
    record.wall_clock = time.perf_counter() - t0
    out = Checkpoint(
        model=model,
        stage="finetuned",
        encoder_metadata=encoder.metadata(),
        train_config=config.as_dict(),
    )
    return out, record


def mean_nonsky_clip_loss(
    images,
    masks,
    model,
    encoder,
    ensembles,
    fill=DEFAULT_FILL,
    orientation: str = "neg-log-pos",
    temperature: float = 1.0,
) -> float:
    """Mean non-sky prompt loss of model outputs over a corpus.

    The before/after comparison of this number is the adaptation signal
    used by the end-to-end regression checks.
    """
    images = list(images)
    if not images:
        raise ValueError("empty evaluation corpus")
    total = 0.0
    with torch.no_grad():
        for im, mask in zip(images, masks):
            x = as_chw_tensor(im)
            out = model.forward_t(x)
            view = composite_tensor(out, ~np.asarray(mask.bits), fill)
            total += float(
                clip_prompt_loss(view, ensembles["non_sky"], encoder, orientation, temperature)
            )
    return total / len(images)
