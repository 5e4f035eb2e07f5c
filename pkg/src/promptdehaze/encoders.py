"""Vision-language encoder backends: a deterministic toy encoder and an
optional pretrained adapter.

Both backends expose the same four operations: ``encode_image`` and
``encode_text`` produce unit-norm latent vectors whose cosine measures
image-text agreement, ``image_layer_features`` returns a 5-level feature
stack for fidelity anchoring, and ``patch_token_features`` returns a grid
of unit-norm per-patch features for similarity maps.

Toy encoder definition (closed form, relied on by tests)
--------------------------------------------------------

Images are bilinearly resized to 64 x 64.  A 6-dim semantic statistic
vector is computed:

    sem6 = [ mean_R - 0.5,
             mean_G - 0.5,
             mean_B - 0.5,
             contrast   - 0.15,   contrast = sqrt(var(gray) + 1e-8)
             dark       - 0.40,   dark = mean of -tau*logsumexp(-x/tau)
                                  over channels per pixel, tau = 0.05
             saturation - 0.12 ]  saturation = mean over pixels of
                                  sqrt(var over channels + 1e-8)

The 32-dim pre-rotation block vector is

    block(x) = [ 2.0 * sem6(x) ; 0.15 * R @ (pool8(x).flatten() - 0.5) ]

where pool8 is 8 x 8 adaptive average pooling (192 values) and R is a
fixed seeded 26 x 192 Gaussian matrix scaled by 1/sqrt(192).  The final
embedding is normalize(Q @ block(x)) for a fixed seeded orthogonal
32 x 32 rotation Q.

Text maps through the same block space.  Quality words contribute the
6-dim anchors

    hazy  h6 = (1, 1, 1, -1,  1, -1) / sqrt(6)
    clean c6 = (1, 1, 1,  1, -1,  1) / sqrt(6)

which are exactly orthogonal: haze brightens, lowers contrast, raises the
dark statistic, and desaturates, while the shared (1,1,1) brightness head
makes the two anchors meet at 90 degrees.  Entity words contribute the
image block of a flat exemplar patch of their canonical color with the
three quality-statistic components zeroed: entity anchors carry color
identity (channel means plus pixel pattern) but stay neutral on the
quality axes.  Zeroing matters: a flat patch otherwise reads as
low-contrast and bright-minimum, which would tilt every entity prompt
toward the hazy side and leak a color-drift component into contrastive
gradients.  With it, positive and negative ensembles of the same entities
align equally with the entity block, so their normalized difference is a
pure quality direction.  A pure sky-colored image patch still lands near
the "sky" text anchor because the color terms dominate both vectors.
Modifier words flip or force the side of the next quality word.  Text with
no known words falls back to a seeded hash direction.

Layer features: level 0 (the stem) is the resized image scaled by 0.1;
level l in 1..4 is 2^l block average pooling of the stem followed by a
fixed seeded 3 x 3 channel mix, so a one-pixel change touches exactly one
cell per level.  The 0.1 stem scale keeps feature-space distances, and
therefore fidelity gradients, at the scale of the prompt losses they are
traded off against.
"""

from __future__ import annotations

import hashlib
import os
import re
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import Image

TOY_RESOLUTION = 64
TOY_GRID = 8
TOY_EMBED_DIM = 32
TOY_SEED = 1234
SEM_WEIGHT = 2.0
PIX_WEIGHT = 0.15
STEM_SCALE = 0.1
SOFTMIN_TAU = 0.05
STAT_CENTERS = (0.15, 0.40, 0.12)  # contrast, dark, saturation
TOY_SKY_RGB = (0.55, 0.72, 0.95)
TOKEN_LIMIT = 77
UNIT_NORM_TOL = 1e-6

CACHE_ENV = "PROMPTDEHAZE_CACHE"

_SQ6 = 1.0 / np.sqrt(6.0)
HAZY_ANCHOR6 = np.array([1, 1, 1, -1, 1, -1], dtype=np.float64) * _SQ6
CLEAN_ANCHOR6 = np.array([1, 1, 1, 1, -1, 1], dtype=np.float64) * _SQ6

HAZY_WORDS = frozenset(
    "fog foggy haze hazy mist misty smog smoggy murky dull dirty grey gray "
    "faded washed flat gloomy overcast".split()
)
CLEAN_WORDS = frozenset(
    "clear clean crisp sharp vivid colorful pristine sunny bright fresh".split()
)
# axis words default to the clean side unless a modifier forces otherwise
AXIS_WORDS = frozenset("quality contrast visibility detail details definition".split())
FLIP_MODIFIERS = frozenset("without no not free less".split())
LOW_MODIFIERS = frozenset("low poor bad reduced".split())
HIGH_MODIFIERS = frozenset("high good great excellent full".split())

# Slightly below mid-gray: an exact 0.5 patch would zero out entirely under
# mean-centering and leave the neutral entities with no anchor at all.
_GRAY = (0.45, 0.45, 0.45)
ENTITY_COLORS: dict[str, tuple[float, float, float]] = {
    "sky": TOY_SKY_RGB,
    "skies": TOY_SKY_RGB,
    "scene": _GRAY,
    "landscape": _GRAY,
    "view": _GRAY,
    "field": _GRAY,
    "building": (0.45, 0.42, 0.40),
    "buildings": (0.45, 0.42, 0.40),
    "house": (0.45, 0.42, 0.40),
    "wall": (0.45, 0.42, 0.40),
    "people": (0.50, 0.35, 0.30),
    "person": (0.50, 0.35, 0.30),
    "man": (0.50, 0.35, 0.30),
    "woman": (0.50, 0.35, 0.30),
    "tree": (0.20, 0.40, 0.18),
    "trees": (0.20, 0.40, 0.18),
    "forest": (0.20, 0.40, 0.18),
    "road": (0.35, 0.35, 0.36),
    "street": (0.35, 0.35, 0.36),
    "path": (0.35, 0.35, 0.36),
    "mountain": (0.40, 0.38, 0.35),
    "mountains": (0.40, 0.38, 0.35),
    "hill": (0.40, 0.38, 0.35),
    "city": (0.42, 0.40, 0.42),
    "cityscape": (0.42, 0.40, 0.42),
    "town": (0.42, 0.40, 0.42),
}

NEUTRAL_TEXTS = ("a photo of a scene", "a picture of a landscape", "an image of a view")


class BackendError(RuntimeError):
    """Encoder backend unavailable or failed to produce features."""


class TruncationWarning(UserWarning):
    """Text exceeded the tokenizer limit and was truncated."""


@dataclass(frozen=True)
class Embedding:
    """Unit-norm latent vector; may carry a live autograd graph."""

    vector: torch.Tensor

    def __post_init__(self):
        v = self.vector
        if not isinstance(v, torch.Tensor) or v.ndim != 1:
            raise ValueError("embedding vector must be a 1-D tensor")
        n = float(torch.linalg.vector_norm(v.detach()))
        if not np.isfinite(n) or abs(n - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"embedding norm {n!r} not within {UNIT_NORM_TOL} of 1")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    @property
    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.vector.detach()))

    def numpy(self) -> np.ndarray:
        return self.vector.detach().cpu().numpy()

    def cos(self, other: "Embedding") -> float:
        return float(self.vector.detach() @ other.vector.detach().to(self.vector.dtype))


@dataclass(frozen=True)
class LayerFeatures:
    """Ordered stack of exactly 5 per-layer feature tensors (index 0..4)."""

    layers: tuple

    def __post_init__(self):
        if len(self.layers) != 5:
            raise ValueError(f"expected 5 feature layers, got {len(self.layers)}")
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def shapes(self) -> tuple:
        return tuple(tuple(t.shape) for t in self.layers)


@dataclass(frozen=True)
class PatchFeatures:
    """H_p x W_p x D grid of unit-norm patch features plus patch geometry.

    ``patch_size`` and ``stride`` are in native encoder pixels;
    ``image_shape`` is the source image's (H, W) so map cells can be
    projected back to source pixel coordinates.
    """

    grid: torch.Tensor
    patch_size: int
    stride: int
    image_shape: tuple[int, int]

    def __post_init__(self):
        g = self.grid
        if not isinstance(g, torch.Tensor) or g.ndim != 3:
            raise ValueError("patch feature grid must be H_p x W_p x D")
        norms = torch.linalg.vector_norm(g.detach(), dim=-1)
        err = float((norms - 1.0).abs().max())
        if err > UNIT_NORM_TOL:
            raise ValueError(f"patch features not unit-norm (max err {err:g})")


def as_chw_tensor(image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Canonicalize an Image, H x W x 3 array, or (3, H, W) tensor.

    Tensors pass through untouched (keeping dtype and autograd graph);
    other inputs are copied to a fresh tensor of the requested dtype.
    """
    if isinstance(image, torch.Tensor):
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"tensor input must be (3, H, W), got {tuple(image.shape)}")
        return image
    if isinstance(image, Image):
        arr = image.pixels
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 array, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def tensor_to_image(x: torch.Tensor) -> Image:
    """(3, H, W) tensor to a clamped Image."""
    arr = x.detach().cpu().clamp(0.0, 1.0).numpy().transpose(1, 2, 0)
    return Image(arr.astype(np.float32))


def _tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z]+", text.lower())


def _stable_seed(tokens: list[str]) -> int:
    digest = hashlib.blake2b(" ".join(tokens).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "big")


class ToyEncoder:
    """Seeded, fully deterministic, differentiable encoder (see module docs).

    All constants are frozen at construction; the instance is read-only
    afterwards and safe to share between threads.
    """

    name = "toy"
    resolution = TOY_RESOLUTION
    patch_grid = TOY_GRID
    embed_dim = TOY_EMBED_DIM

    def __init__(self, seed: int = TOY_SEED):
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        n_pix = 3 * TOY_GRID * TOY_GRID
        self._R = rng.standard_normal((TOY_EMBED_DIM - 6, n_pix)) / np.sqrt(n_pix)
        q, r = np.linalg.qr(rng.standard_normal((TOY_EMBED_DIM, TOY_EMBED_DIM)))
        self._Q = q * np.sign(np.diag(r))  # canonical sign, fully determined by seed
        self._mixes = [
            np.eye(3) + 0.3 * rng.standard_normal((3, 3)) for _ in range(4)
        ]
        self._R.setflags(write=False)
        self._Q.setflags(write=False)
        for m in self._mixes:
            m.setflags(write=False)
        self._const_cache: dict[torch.dtype, dict[str, torch.Tensor]] = {}
        self._exemplar_cache: dict[tuple, torch.Tensor] = {}

    # -- constants ----------------------------------------------------------

    def _consts(self, dtype: torch.dtype) -> dict[str, torch.Tensor]:
        cached = self._const_cache.get(dtype)
        if cached is None:
            cached = {
                "R": torch.from_numpy(self._R.copy()).to(dtype),
                "Q": torch.from_numpy(self._Q.copy()).to(dtype),
                "mixes": [torch.from_numpy(m.copy()).to(dtype) for m in self._mixes],
                "hazy6": torch.from_numpy(HAZY_ANCHOR6.copy()).to(dtype),
                "clean6": torch.from_numpy(CLEAN_ANCHOR6.copy()).to(dtype),
            }
            self._const_cache[dtype] = cached
        return cached

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self._R.tobytes())
        h.update(self._Q.tobytes())
        for m in self._mixes:
            h.update(m.tobytes())
        h.update(HAZY_ANCHOR6.tobytes())
        h.update(CLEAN_ANCHOR6.tobytes())
        for word, rgb in sorted(ENTITY_COLORS.items()):
            h.update(word.encode())
            h.update(np.asarray(rgb, dtype=np.float64).tobytes())
        return h.hexdigest()

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "embed_dim": self.embed_dim,
            "resolution": self.resolution,
            "patch_grid": self.patch_grid,
            "preprocessing": "bilinear resize to 64x64, identity normalization",
            "checksum": self.checksum(),
        }

    # -- image path ---------------------------------------------------------

    def _canon(self, image) -> torch.Tensor:
        x = as_chw_tensor(image)
        if x.shape[1] != self.resolution or x.shape[2] != self.resolution:
            x = F.interpolate(
                x.unsqueeze(0),
                size=(self.resolution, self.resolution),
                mode="bilinear",
                align_corners=False,
            ).squeeze(0)
        return x

    def _sem6(self, x: torch.Tensor) -> torch.Tensor:
        """Semantic statistics of any (3, h, w) tensor; differentiable."""
        means = x.mean(dim=(1, 2)) - 0.5
        gray = x.mean(dim=0)
        contrast = torch.sqrt(gray.var(unbiased=False) + 1e-8)
        dark = (-SOFTMIN_TAU * torch.logsumexp(-x / SOFTMIN_TAU, dim=0)).mean()
        saturation = torch.sqrt(x.var(dim=0, unbiased=False) + 1e-8).mean()
        c_con, c_dark, c_sat = STAT_CENTERS
        stats = torch.stack([contrast - c_con, dark - c_dark, saturation - c_sat])
        return torch.cat([means, stats])

    def _block(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-rotation 32-dim block vector of a (3, h, w) tensor."""
        consts = self._consts(x.dtype)
        pooled = F.adaptive_avg_pool2d(x.unsqueeze(0), (TOY_GRID, TOY_GRID)).squeeze(0)
        pix = consts["R"] @ (pooled.reshape(-1) - 0.5)
        return torch.cat([SEM_WEIGHT * self._sem6(x), PIX_WEIGHT * pix])

    def _embed_block(self, block: torch.Tensor) -> torch.Tensor:
        z = self._consts(block.dtype)["Q"] @ block
        n = torch.linalg.vector_norm(z)
        if float(n.detach()) < 1e-8:
            raise BackendError("degenerate input: zero-norm latent block")
        return z / n

    def encode_image(self, image) -> Embedding:
        return Embedding(self._embed_block(self._block(self._canon(image))))

    def image_layer_features(self, image) -> LayerFeatures:
        # The stem compresses dynamic range by STEM_SCALE so feature-space
        # distances (and their gradients) sit at the scale of prompt losses;
        # without it the fidelity anchor overwhelms the guidance terms.
        x = STEM_SCALE * self._canon(image)
        consts = self._consts(x.dtype)
        layers = [x]
        for level in range(1, 5):
            b = 2 ** level
            pooled = F.avg_pool2d(x.unsqueeze(0), kernel_size=b, stride=b).squeeze(0)
            mixed = torch.einsum("dc,chw->dhw", consts["mixes"][level - 1], pooled)
            layers.append(mixed)
        return LayerFeatures(tuple(layers))

    def patch_token_features(self, image) -> PatchFeatures:
        orig = as_chw_tensor(image)
        h, w = int(orig.shape[1]), int(orig.shape[2])
        x = self._canon(orig)
        g, p = TOY_GRID, self.resolution // TOY_GRID
        patches = x.reshape(3, g, p, g, p).permute(1, 3, 0, 2, 4)
        feats = []
        for i in range(g):
            row = [self._embed_block(self._block(patches[i, j])) for j in range(g)]
            feats.append(torch.stack(row))
        grid = torch.stack(feats)
        return PatchFeatures(grid=grid, patch_size=p, stride=p, image_shape=(h, w))

    # -- text path ----------------------------------------------------------

    def _exemplar_block(self, rgb: tuple, dtype: torch.dtype) -> torch.Tensor:
        key = (rgb, dtype)
        block = self._exemplar_cache.get(key)
        if block is None:
            px = torch.empty((3, self.resolution, self.resolution), dtype=dtype)
            for c in range(3):
                px[c] = rgb[c]
            block = self._block(px).clone()
            # Entity anchors are quality-neutral: zero the contrast, dark, and
            # saturation components so entity and quality directions never mix.
            block[3:6] = 0.0
            self._exemplar_cache[key] = block
        return block

    def encode_text(self, text: str, dtype: torch.dtype = torch.float32) -> Embedding:
        if not isinstance(text, str) or not text.strip():
            raise ValueError("text prompt must be a nonempty string")
        tokens = _tokenize(text)
        if not tokens:
            raise ValueError(f"text prompt has no encodable tokens: {text!r}")
        if len(tokens) > TOKEN_LIMIT:
            warnings.warn(
                f"prompt exceeds {TOKEN_LIMIT} tokens; truncated", TruncationWarning
            )
            tokens = tokens[:TOKEN_LIMIT]

        consts = self._consts(dtype)
        quality_vecs = []
        entity_blocks = []
        pending: list[str] = []
        for tok in tokens:
            if tok in FLIP_MODIFIERS or tok in LOW_MODIFIERS or tok in HIGH_MODIFIERS:
                pending.append(tok)
            elif tok in HAZY_WORDS or tok in CLEAN_WORDS or tok in AXIS_WORDS:
                side = "hazy" if tok in HAZY_WORDS else "clean"
                for mod in reversed(pending):  # innermost modifier binds first
                    if mod in LOW_MODIFIERS:
                        side = "hazy"
                    elif mod in HIGH_MODIFIERS:
                        side = "clean"
                    else:
                        side = "clean" if side == "hazy" else "hazy"
                pending.clear()
                quality_vecs.append(consts["hazy6" if side == "hazy" else "clean6"])
            elif tok in ENTITY_COLORS:
                entity_blocks.append(self._exemplar_block(ENTITY_COLORS[tok], dtype))

        block = torch.zeros(TOY_EMBED_DIM, dtype=dtype)
        if quality_vecs:
            block[:6] += SEM_WEIGHT * torch.stack(quality_vecs).mean(dim=0)
        if entity_blocks:
            block = block + torch.stack(entity_blocks).mean(dim=0)
        if not quality_vecs and not entity_blocks:
            rng = np.random.default_rng(_stable_seed(tokens))
            fallback = torch.from_numpy(rng.standard_normal(TOY_EMBED_DIM)).to(dtype)
            block = fallback
        return Embedding(self._embed_block(block))

    def neutral_text_bank(self) -> tuple:
        return tuple(self.encode_text(t) for t in NEUTRAL_TEXTS)


class PretrainedClipEncoder:
    """Adapter over a HuggingFace CLIP checkpoint with the same interface.

    Requires the optional ``transformers`` dependency and local or
    downloadable weights; raises BackendError otherwise.  The model is
    frozen: parameters are never updated here.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", cache_dir=None):
        try:
            from transformers import CLIPModel, CLIPProcessor  # noqa: PLC0415
        except ImportError as exc:
            raise BackendError(
                "pretrained encoder needs the 'transformers' extra installed"
            ) from exc
        cache_dir = cache_dir or os.environ.get(CACHE_ENV)
        try:
            self.model = CLIPModel.from_pretrained(model_name, cache_dir=cache_dir)
            self.processor = CLIPProcessor.from_pretrained(model_name, cache_dir=cache_dir)
        except Exception as exc:  # weights missing, offline, bad name
            raise BackendError(f"cannot load pretrained encoder {model_name}: {exc}") from exc
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.name = model_name
        self.embed_dim = int(self.model.config.projection_dim)
        self.resolution = int(self.model.config.vision_config.image_size)
        self.patch_grid = self.resolution // int(
            self.model.config.vision_config.patch_size
        )

    def _preprocess(self, image) -> torch.Tensor:
        x = as_chw_tensor(image).unsqueeze(0)
        x = F.interpolate(
            x, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False
        )
        ip = self.processor.image_processor
        mean = torch.tensor(ip.image_mean).view(1, 3, 1, 1)
        std = torch.tensor(ip.image_std).view(1, 3, 1, 1)
        return (x - mean) / std

    def encode_image(self, image) -> Embedding:
        feats = self.model.get_image_features(pixel_values=self._preprocess(image))
        return Embedding(F.normalize(feats, dim=-1).squeeze(0))

    def encode_text(self, text: str, dtype: torch.dtype = torch.float32) -> Embedding:
        if not isinstance(text, str) or not text.strip():
            raise ValueError("text prompt must be a nonempty string")
        tok = self.processor.tokenizer
        ids = tok(text, truncation=False)["input_ids"]
        if len(ids) > tok.model_max_length:
            warnings.warn(
                f"prompt exceeds {tok.model_max_length} tokens; truncated",
                TruncationWarning,
            )
        batch = tok(text, truncation=True, return_tensors="pt")
        feats = self.model.get_text_features(**batch)
        return Embedding(F.normalize(feats, dim=-1).squeeze(0).to(dtype))

    def image_layer_features(self, image) -> LayerFeatures:
        out = self.model.vision_model(
            pixel_values=self._preprocess(image), output_hidden_states=True
        )
        hidden = out.hidden_states  # embeddings output + one per transformer layer
        last = len(hidden) - 1
        picks = [0] + [round(last * k / 4) for k in range(1, 5)]
        return LayerFeatures(tuple(hidden[i].squeeze(0) for i in picks))

    def patch_token_features(self, image) -> PatchFeatures:
        orig = as_chw_tensor(image)
        h, w = int(orig.shape[1]), int(orig.shape[2])
        out = self.model.vision_model(pixel_values=self._preprocess(orig))
        tokens = out.last_hidden_state.squeeze(0)[1:]  # drop the class token
        tokens = self.model.visual_projection(self.model.vision_model.post_layernorm(tokens))
        tokens = F.normalize(tokens, dim=-1)
        g = self.patch_grid
        ps = self.resolution // g
        return PatchFeatures(
            grid=tokens.reshape(g, g, -1), patch_size=ps, stride=ps, image_shape=(h, w)
        )

    def neutral_text_bank(self) -> tuple:
        return tuple(self.encode_text(t) for t in NEUTRAL_TEXTS)

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for key, tensor in sorted(self.model.state_dict().items()):
            h.update(key.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "embed_dim": self.embed_dim,
            "resolution": self.resolution,
            "patch_grid": self.patch_grid,
            "preprocessing": "bilinear resize + CLIP mean/std normalization",
            "checksum": self.checksum(),
        }


def get_encoder(name: str = "toy", seed: int = TOY_SEED, cache_dir=None):
    """Construct an encoder backend by config name ("toy" or a model id)."""
    if name == "toy":
        return ToyEncoder(seed=seed)
    return PretrainedClipEncoder(model_name=name, cache_dir=cache_dir)
