"""Sky / non-sky region discovery from language-image similarity.

The pipeline: score image patches against a sky description
(`similarity_map`), pick high-scoring patch centers as point prompts
(`select_sky_points`), hand the points to a promptable segmenter or the
built-in heuristic (`segment_sky`), and clean the mask (`refine_mask`).
Masks are cached per image before fine-tuning since they never change.

The ``surgery`` map backend applies a simplified explainability
transform: patch features stay value-local (for the toy encoder they
already are) and the target text embedding is debiased by subtracting
the mean embedding of a bank of neutral texts before the cosine.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .encoders import Embedding
from .imaging import Image, RegionMask, _lock, _pixels
from .prompts import build_prompt_set, ensemble_embedding

MAP_BACKENDS = ("raw", "surgery")
DEFAULT_POINTS = 3
DEFAULT_PERCENTILE = 95.0

LUMINANCE_THRESH = 0.6   # channel mean above this reads as bright
SATURATION_THRESH = 0.25  # channel range below this reads as uncolored
GRADIENT_THRESH = 0.05   # luminance gradient magnitude below this reads as flat

_CLOSE_STRUCT = np.ones((3, 3), dtype=bool)
_REFINE_MAX_ITER = 256


@dataclass(frozen=True)
class SimilarityMap:
    """Per-patch cosine scores in [-1, 1] on an H_p x W_p grid."""

    grid: np.ndarray
    image_shape: tuple[int, int]

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float32)
        if g.ndim != 2:
            raise ValueError(f"similarity grid must be 2-D, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("similarity grid contains non-finite values")
        if g.min() < -1.0 - 1e-5 or g.max() > 1.0 + 1e-5:
            raise ValueError("similarity values must be cosines in [-1, 1]")
        object.__setattr__(self, "grid", _lock(np.clip(g, -1.0, 1.0)))
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))

    def patch_center(self, i: int, j: int) -> tuple[int, int]:
        """Source-pixel coordinates of the center of map cell (i, j)."""
        hp, wp = self.grid.shape
        h, w = self.image_shape
        return (
            min(int((i + 0.5) * h / hp), h - 1),
            min(int((j + 0.5) * w / wp), w - 1),
        )


@dataclass(frozen=True)
class PointPrompt:
    """Pixel coordinates with matching scores, sorted by score descending."""

    points: tuple
    scores: tuple

    def __post_init__(self):
        pts = tuple((int(r), int(c)) for r, c in self.points)
        scs = tuple(float(s) for s in self.scores)
        if len(pts) != len(scs):
            raise ValueError("points and scores must have equal length")
        if any(scs[i] < scs[i + 1] for i in range(len(scs) - 1)):
            raise ValueError("scores must be sorted descending")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "scores", scs)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointPrompt":
        return cls(points=(), scores=())


def sky_locator_embedding(encoder) -> Embedding:
    """Default text embedding for locating sky in hazy inputs.

    Uses the ensembled hazy-side sky prompts, since the images being
    located in are hazy.
    """
    sky_set = build_prompt_set("sky", ("sky",))
    return ensemble_embedding(sky_set, encoder).negative_embeddings[0]


def similarity_map(image, text_emb: Embedding, encoder, backend: str = "raw") -> SimilarityMap:
    """Cosine between each patch feature and a text embedding."""
    if backend not in MAP_BACKENDS:
        raise ValueError(f"unknown map backend {backend!r}; expected one of {MAP_BACKENDS}")
    if backend == "surgery" and hasattr(encoder, "surgery_patch_features"):
        feats = encoder.surgery_patch_features(image)
    else:
        feats = encoder.patch_token_features(image)
    t = text_emb.vector.detach()
    if backend == "surgery":
        bank = torch.stack([e.vector for e in encoder.neutral_text_bank()])
        t = F.normalize(t - bank.mean(dim=0).to(t.dtype), dim=0, eps=1e-12)
    grid = feats.grid.detach() @ t.to(feats.grid.dtype)
    return SimilarityMap(grid=grid.cpu().numpy(), image_shape=feats.image_shape)


def select_sky_points(
    sim_map: SimilarityMap, k: int = DEFAULT_POINTS, percentile: float = DEFAULT_PERCENTILE
) -> PointPrompt:
    """Up to k patch centers scoring strictly above the given percentile.

    An empty result is valid and means "no sky found".
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0.0 < percentile < 100.0:
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    grid = sim_map.grid
    thresh = float(np.percentile(grid, percentile))
    rows, cols = np.nonzero(grid > thresh)
    if rows.size == 0:
        return PointPrompt.empty()
    scores = grid[rows, cols]
    order = np.lexsort((cols, rows, -scores))[:k]
    pts = [sim_map.patch_center(int(rows[i]), int(cols[i])) for i in order]
    return PointPrompt(points=tuple(pts), scores=tuple(float(scores[i]) for i in order))


def _close3(bits: np.ndarray) -> np.ndarray:
    # explicit border values keep closing extensive at the image edge
    dilated = ndimage.binary_dilation(bits, structure=_CLOSE_STRUCT, border_value=0)
    return ndimage.binary_erosion(dilated, structure=_CLOSE_STRUCT, border_value=1)


def _keep_top_components(bits: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(bits)
    if count == 0:
        return bits
    top = np.unique(labels[0])
    top = top[top != 0]
    if top.size == 0:
        return np.zeros_like(bits)
    return np.isin(labels, top)


def _refine_step(bits: np.ndarray) -> np.ndarray:
    return ndimage.binary_fill_holes(_keep_top_components(_close3(bits)))


def refine_mask(mask: RegionMask) -> RegionMask:
    """Close 3x3, drop components not touching the top border, fill holes.

    The step is iterated to a fixed point so the operation is idempotent;
    if the iteration ever cycles, the lexicographically smallest state of
    the cycle is returned, which is the same canonical pick from any
    starting point inside the cycle.
    """
    cur = np.asarray(mask.bits, dtype=bool).copy()
    seen: dict[bytes, int] = {}
    states: list[np.ndarray] = []
    for _ in range(_REFINE_MAX_ITER):
        key = cur.tobytes()
        if key in seen:
            cycle = states[seen[key]:]
            return RegionMask(min(cycle, key=np.ndarray.tobytes))
        seen[key] = len(states)
        states.append(cur)
        nxt = _refine_step(cur)
        if np.array_equal(nxt, cur):
            return RegionMask(cur)
        cur = nxt
    raise RuntimeError("mask refinement did not converge")


def heuristic_sky_mask(
    image,
    lum_thresh: float = LUMINANCE_THRESH,
    sat_thresh: float = SATURATION_THRESH,
    grad_thresh: float = GRADIENT_THRESH,
) -> RegionMask:
    """Built-in sky detector: bright, uncolored, flat, touching the top.

    Definitions: luminance = per-pixel channel mean; saturation = channel
    range (max - min); gradient = magnitude of the luminance gradient
    (central differences).  Pixels passing all three thresholds are kept
    if 4-connected to the top border, then refined.
    """
    px = _pixels(image)
    lum = px.mean(axis=2)
    sat = px.max(axis=2) - px.min(axis=2)
    gy, gx = np.gradient(lum)
    grad = np.hypot(gx, gy)
    cand = (lum > lum_thresh) & (sat < sat_thresh) & (grad < grad_thresh)
    return refine_mask(RegionMask(_keep_top_components(cand)))


def segment_sky(image, points: PointPrompt, segmenter=None) -> RegionMask:
    """Sky mask from point prompts via a promptable segmenter.

    ``segmenter`` is any callable (image, points) -> mask array.  Without
    one, or when one fails, the built-in heuristic is used (with a
    recorded warning on failure).  The heuristic is a whole-image detector
    and ignores the point coordinates.  An empty PointPrompt short-circuits
    to an all-false mask: no sky region.
    """
    px = _pixels(image)
    h, w = px.shape[:2]
    if len(points) == 0:
        return RegionMask.all_false(h, w)
    for r, c in points.points:
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"point ({r}, {c}) outside image bounds {(h, w)}")
    if segmenter is None:
        return heuristic_sky_mask(image)
    try:
        raw = segmenter(image, points.points)
    except Exception as exc:
        warnings.warn(
            f"segmenter backend failed ({exc}); falling back to heuristic",
            RuntimeWarning,
        )
        return heuristic_sky_mask(image)
    mask = raw if isinstance(raw, RegionMask) else RegionMask(np.asarray(raw, dtype=bool))
    if mask.shape != (h, w):
        raise ValueError(f"segmenter returned shape {mask.shape}, expected {(h, w)}")
    return refine_mask(mask)


def compute_sky_mask(
    image,
    encoder,
    text_emb: Embedding | None = None,
    backend: str = "surgery",
    k: int = DEFAULT_POINTS,
    percentile: float = DEFAULT_PERCENTILE,
    segmenter=None,
) -> RegionMask:
    """Full pipeline: similarity map -> point prompts -> segmentation."""
    if text_emb is None:
        text_emb = sky_locator_embedding(encoder)
    smap = similarity_map(image, text_emb, encoder, backend=backend)
    points = select_sky_points(smap, k=k, percentile=percentile)
    return segment_sky(image, points, segmenter=segmenter)


def build_mask_cache(images, encoder, **kwargs) -> list[RegionMask]:
    """Precompute one sky mask per image (masks are fixed during training)."""
    text_emb = kwargs.pop("text_emb", None)
    if text_emb is None:
        text_emb = sky_locator_embedding(encoder)
    return [compute_sky_mask(im, encoder, text_emb=text_emb, **kwargs) for im in images]
