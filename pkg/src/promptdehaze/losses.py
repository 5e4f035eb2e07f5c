"""Prompt-contrastive, region-composed, and fidelity losses.

The total objective for one image I with network output O = model(I):

    total    = guidance + lambda2 * fidelity
    guidance = sky + non_sky + lambda1 * enhance

where each of sky / non_sky / enhance is a contrastive prompt loss on a
(masked) view of O, and fidelity is a 5-layer encoder-feature distance
sum_l alpha_l * ||phi_l(O) - phi_l(I)||_2 anchoring O to the input.

Everything returns 0-dim torch tensors and is differentiable with
respect to the network output (and through it the model parameters), so
the same code path serves training, gradient checking (feed float64
tensors), and scalar evaluation (wrap in float()).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoders import as_chw_tensor
from .prompts import EnsembledPrompts, positive_logmass

ORIENTATIONS = ("neg-log-pos", "literal-pos")
REGION_MODES = ("mask-output", "mask-input")
DEFAULT_FILL = (0.5, 0.5, 0.5)
BREAKDOWN_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Tradeoff coefficients; defaults lambda1=0.5, lambda2=0.1, alpha=(1,1,1,1,0.5)."""

    lambda1: float = 0.5
    lambda2: float = 0.1
    alpha: tuple = (1.0, 1.0, 1.0, 1.0, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be >= 0")
        if len(self.alpha) != 5:
            raise ValueError(f"alpha must have exactly 5 entries, got {len(self.alpha)}")
        if any(a < 0 for a in self.alpha):
            raise ValueError("alpha entries must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """All loss terms of one evaluation, as live 0-dim tensors.

    Construction verifies the composition identities
    total = guidance + lambda2*fidelity and
    guidance = sky + non_sky + lambda1*enhance within 1e-6.
    """

    total: torch.Tensor
    guidance: torch.Tensor
    fidelity: torch.Tensor
    sky: torch.Tensor
    non_sky: torch.Tensor
    enhance: torch.Tensor
    weights: LossWeights

    def __post_init__(self):
        vals = self.as_floats()
        if not all(np.isfinite(v) for v in vals.values()):
            raise ValueError(f"non-finite loss terms: {vals}")
        w = self.weights
        g = vals["sky"] + vals["non_sky"] + w.lambda1 * vals["enhance"]
        t = vals["guidance"] + w.lambda2 * vals["fidelity"]
        if abs(vals["guidance"] - g) > BREAKDOWN_TOL or abs(vals["total"] - t) > BREAKDOWN_TOL:
            raise ValueError(f"loss breakdown identities violated: {vals}")

    def as_floats(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "guidance": float(self.guidance.detach()),
            "fidelity": float(self.fidelity.detach()),
            "sky": float(self.sky.detach()),
            "non_sky": float(self.non_sky.detach()),
            "enhance": float(self.enhance.detach()),
        }


def composite_tensor(x: torch.Tensor, mask_bits, fill=DEFAULT_FILL) -> torch.Tensor:
    """Tensor analogue of imaging.composite; differentiable through kept pixels."""
    if isinstance(mask_bits, torch.Tensor):
        m = mask_bits.bool()
    else:
        # Copy: mask arrays may be read-only and torch warns on wrapping those.
        m = torch.from_numpy(np.array(mask_bits, dtype=bool))
    if m.shape != x.shape[1:]:
        raise ValueError(f"mask shape {tuple(m.shape)} != image shape {tuple(x.shape[1:])}")
    fill_t = torch.tensor(fill, dtype=x.dtype).view(3, 1, 1)
    return torch.where(m.unsqueeze(0), x, fill_t)


def clip_prompt_loss(
    image,
    prompts: EnsembledPrompts,
    encoder,
    orientation: str = "neg-log-pos",
    temperature: float = 1.0,
) -> torch.Tensor:
    """Contrastive prompt loss of an image against an ensembled prompt set.

    Default orientation "neg-log-pos" returns -log(p_pos), which is
    minimized when the image aligns with the positive (desired) prompt.
    "literal-pos" returns p_pos itself as the loss value.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"unknown orientation {orientation!r}; expected {ORIENTATIONS}")
    emb = encoder.encode_image(image)
    logmass = positive_logmass(emb.vector, prompts, temperature)
    return -logmass if orientation == "neg-log-pos" else logmass.exp()


def _norm2(diff: torch.Tensor) -> torch.Tensor:
    # sqrt guarded so the gradient at an exactly-zero difference is 0, not NaN
    s = (diff * diff).sum()
    return torch.where(s > 0, torch.sqrt(torch.clamp(s, min=1e-40)), torch.zeros_like(s))


def fidelity_loss(inp, out, encoder, alpha=(1.0, 1.0, 1.0, 1.0, 0.5)) -> torch.Tensor:
    """Sum over 5 encoder layers of alpha_l * ||phi_l(out) - phi_l(inp)||_2."""
    alpha = tuple(float(a) for a in alpha)
    if len(alpha) != 5:
        raise ValueError(f"alpha must have exactly 5 entries, got {len(alpha)}")
    f_in = encoder.image_layer_features(inp)
    f_out = encoder.image_layer_features(out)
    total = None
    for a, ti, to in zip(alpha, f_in.layers, f_out.layers):
        if ti.shape != to.shape:
            raise ValueError(f"layer shape mismatch: {tuple(ti.shape)} vs {tuple(to.shape)}")
        term = a * _norm2((to - ti).reshape(-1))
        total = term if total is None else total + term
    return total


def _guidance_terms(
    x: torch.Tensor,
    out: torch.Tensor,
    sky_bits: np.ndarray,
    model,
    sets: dict,
    encoder,
    weights: LossWeights,
    region_mode: str,
    region_split: bool,
    enhance_set: bool,
    orientation: str,
    temperature: float,
    fill,
) -> dict:
    if region_mode not in REGION_MODES:
        raise ValueError(f"unknown region mode {region_mode!r}; expected {REGION_MODES}")
    zero = torch.zeros((), dtype=out.dtype)

    def term(view, role):
        return clip_prompt_loss(view, sets[role], encoder, orientation, temperature)

    if region_split:
        has_sky = bool(sky_bits.any())
        if region_mode == "mask-output":
            sky_term = term(composite_tensor(out, sky_bits, fill), "sky") if has_sky else zero
            non_term = term(composite_tensor(out, ~sky_bits, fill), "non_sky")
        else:  # mask-input: the network sees the masked image, per-region forwards
            sky_term = (
                term(model.forward_t(composite_tensor(x, sky_bits, fill)), "sky")
                if has_sky
                else zero
            )
            non_term = term(model.forward_t(composite_tensor(x, ~sky_bits, fill)), "non_sky")
    else:
        # ablation: one dehazing prompt set judges the whole image
        sky_term = zero
        non_term = term(out, "non_sky")
    enh_term = term(out, "enhance") if enhance_set else zero
    guidance = sky_term + non_term + weights.lambda1 * enh_term
    return {"sky": sky_term, "non_sky": non_term, "enhance": enh_term, "guidance": guidance}


def guidance_loss(
    image,
    sky_mask,
    model,
    sets: dict,
    encoder,
    weights: LossWeights = LossWeights(),
    **kwargs,
) -> torch.Tensor:
    """Region-composed prompt loss: sky + non_sky + lambda1 * enhance."""
    return total_loss(image, sky_mask, model, sets, encoder, weights, **kwargs).guidance


def total_loss(
    image,
    sky_mask,
    model,
    sets: dict,
    encoder,
    weights: LossWeights = LossWeights(),
    *,
    region_mode: str = "mask-output",
    region_split: bool = True,
    enhance_set: bool = True,
    orientation: str = "neg-log-pos",
    temperature: float = 1.0,
    fill=DEFAULT_FILL,
) -> LossBreakdown:
    """Full objective with per-term breakdown.

    In the default mask-output mode the model runs exactly once per call
    and every term reuses that output; mask-input mode adds one forward
    per masked region.
    """
    x = as_chw_tensor(image)
    sky_bits = np.asarray(sky_mask.bits, dtype=bool)
    if sky_bits.shape != tuple(x.shape[1:]):
        raise ValueError(
            f"sky mask shape {sky_bits.shape} != image shape {tuple(x.shape[1:])}"
        )
    out = model.forward_t(x)
    terms = _guidance_terms(
        x, out, sky_bits, model, sets, encoder, weights,
        region_mode, region_split, enhance_set, orientation, temperature, fill,
    )
    fidelity = fidelity_loss(x, out, encoder, weights.alpha)
    total = terms["guidance"] + weights.lambda2 * fidelity
    return LossBreakdown(
        total=total,
        guidance=terms["guidance"],
        fidelity=fidelity,
        sky=terms["sky"],
        non_sky=terms["non_sky"],
        enhance=terms["enhance"],
        weights=weights,
    )
