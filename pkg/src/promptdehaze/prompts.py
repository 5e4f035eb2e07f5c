"""Contrastive prompt sets and latent-space prompt ensembling.

Three prompt roles drive adaptation: ``sky`` and ``non_sky`` carry
region-specific wording, while ``enhance`` judges the whole picture.
Each set pairs positive (desired: clean, sharp) strings against negative
(hazy, degraded) strings.  Template expansion inserts entity nouns into
template strings; ensembling averages member embeddings in latent space
and renormalizes.  For the sky and non_sky roles both polarities collapse
to a single embedding (K = 1); the enhance role keeps its negatives
separate, exercising the general K-negative softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .encoders import Embedding

ROLES = ("sky", "non_sky", "enhance")

DEFAULT_POSITIVE_TEMPLATES = (
    "a picture of {} without fog.",
    "a photo of a clear {}.",
)
DEFAULT_NEGATIVE_TEMPLATES = (
    "a picture of {} in the fog.",
    "a photo of a foggy {}.",
)
DEFAULT_ENTITIES = {
    "sky": ("sky",),
    "non_sky": ("building", "people", "scene"),
}
DEFAULT_ENHANCE_POSITIVES = ("a sharp, colorful, high-quality photo",)
DEFAULT_ENHANCE_NEGATIVES = (
    "a dull, dirty, low-quality photo",
    "a grey, low-contrast photo",
)


class TemplateFormatError(ValueError):
    """Template string does not contain exactly one entity placeholder."""


@dataclass(frozen=True)
class PromptSet:
    """Positive and negative prompt strings for one role."""

    role: str
    positives: tuple
    negatives: tuple

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if not self.positives or not self.negatives:
            raise ValueError("prompt set needs at least one positive and one negative")
        for s in self.positives + self.negatives:
            if not isinstance(s, str) or not s.strip():
                raise ValueError("prompts must be nonempty strings")

    @property
    def K(self) -> int:
        """Number of distinct negative prompts after ensembling."""
        return len(self.negatives) if self.role == "enhance" else 1


@dataclass(frozen=True)
class EnsembledPrompts:
    """One positive embedding against K >= 1 negative embeddings."""

    role: str
    positive_embedding: Embedding
    negative_embeddings: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "negative_embeddings", tuple(self.negative_embeddings)
        )
        if len(self.negative_embeddings) < 1:
            raise ValueError("need at least one negative embedding")

    @property
    def K(self) -> int:
        return len(self.negative_embeddings)


def _expand(templates, entities) -> tuple:
    out = []
    for t in templates:
        if t.count("{}") != 1:
            raise TemplateFormatError(
                f"template must contain exactly one '{{}}' placeholder: {t!r}"
            )
        for e in entities:
            out.append(t.format(e))
    return tuple(out)


def build_prompt_set(
    role: str,
    entities,
    positive_templates=DEFAULT_POSITIVE_TEMPLATES,
    negative_templates=DEFAULT_NEGATIVE_TEMPLATES,
) -> PromptSet:
    """Cartesian template x entity expansion into a PromptSet."""
    entities = tuple(entities)
    if not entities:
        raise ValueError("entity list must be nonempty")
    return PromptSet(
        role=role,
        positives=_expand(positive_templates, entities),
        negatives=_expand(negative_templates, entities),
    )


def build_default_prompt_sets() -> dict:
    """The shipped default T_sky / T_non_sky / T_enhance prompt sets."""
    return {
        "sky": build_prompt_set("sky", DEFAULT_ENTITIES["sky"]),
        "non_sky": build_prompt_set("non_sky", DEFAULT_ENTITIES["non_sky"]),
        "enhance": PromptSet(
            role="enhance",
            positives=DEFAULT_ENHANCE_POSITIVES,
            negatives=DEFAULT_ENHANCE_NEGATIVES,
        ),
    }


def load_prompt_config(path) -> dict:
    """Load prompt sets from a JSON file.

    Each role maps either to literal {"positives": [...], "negatives": [...]}
    lists or to {"entities": [...], "positive_templates": [...],
    "negative_templates": [...]} for template expansion.
    """
    data = json.loads(Path(path).read_text())
    sets = {}
    for role, cfg in data.items():
        if "positives" in cfg:
            sets[role] = PromptSet(
                role=role,
                positives=tuple(cfg["positives"]),
                negatives=tuple(cfg["negatives"]),
            )
        else:
            sets[role] = build_prompt_set(
                role,
                cfg["entities"],
                tuple(cfg.get("positive_templates", DEFAULT_POSITIVE_TEMPLATES)),
                tuple(cfg.get("negative_templates", DEFAULT_NEGATIVE_TEMPLATES)),
            )
    return sets


def _mean_embedding(vectors) -> Embedding:
    stacked = torch.stack([v.detach() for v in vectors])
    mean = stacked.mean(dim=0)
    n = float(torch.linalg.vector_norm(mean))
    if n < 1e-8:
        raise ValueError("degenerate prompt ensemble: members cancel to zero")
    return Embedding(F.normalize(mean, dim=0, eps=1e-12))


def ensemble_embedding(prompt_set: PromptSet, text_encoder) -> EnsembledPrompts:
    """Encode and average a prompt set in latent space.

    Positives always collapse to one renormalized mean embedding.  For the
    sky and non_sky roles the negatives collapse the same way (K = 1); for
    the enhance role each negative stays separate (K = len(negatives)).
    """
    pos_vecs = [text_encoder.encode_text(s).vector for s in prompt_set.positives]
    positive = _mean_embedding(pos_vecs)
    if prompt_set.role == "enhance":
        negatives = tuple(text_encoder.encode_text(s) for s in prompt_set.negatives)
    else:
        neg_vecs = [text_encoder.encode_text(s).vector for s in prompt_set.negatives]
        negatives = (_mean_embedding(neg_vecs),)
    return EnsembledPrompts(
        role=prompt_set.role, positive_embedding=positive, negative_embeddings=negatives
    )


def class_logits(image_vector: torch.Tensor, prompts: EnsembledPrompts,
                 temperature: float = 1.0) -> torch.Tensor:
    """Cosine logits [positive, negative_1..negative_K] for a unit image vector."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    dtype = image_vector.dtype
    vecs = [prompts.positive_embedding.vector.to(dtype)]
    vecs += [e.vector.to(dtype) for e in prompts.negative_embeddings]
    if vecs[0].shape != image_vector.shape:
        raise ValueError(
            f"embedding dimension mismatch: image {tuple(image_vector.shape)} "
            f"vs prompts {tuple(vecs[0].shape)}"
        )
    sims = torch.stack([image_vector @ v for v in vecs])
    return sims / temperature


def positive_logmass(image_vector: torch.Tensor, prompts: EnsembledPrompts,
                     temperature: float = 1.0) -> torch.Tensor:
    """log of the softmax mass on the positive prompt; differentiable."""
    return F.log_softmax(class_logits(image_vector, prompts, temperature), dim=0)[0]


def positive_probability(image_emb: Embedding, prompts: EnsembledPrompts,
                         temperature: float = 1.0) -> torch.Tensor:
    """Softmax mass on the positive prompt over {positive, negatives}.

    Strictly inside (0, 1); all class masses sum to 1.
    """
    return positive_logmass(image_emb.vector, prompts, temperature).exp()


def class_masses(image_emb: Embedding, prompts: EnsembledPrompts,
                 temperature: float = 1.0) -> torch.Tensor:
    """Full softmax distribution over [positive, negative_1..negative_K]."""
    return F.softmax(class_logits(image_emb.vector, prompts, temperature), dim=0)
