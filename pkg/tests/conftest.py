"""Shared fixtures: one toy encoder, default prompt machinery, toy corpora.

The encoder and prompt ensembles are deterministic and read-only, so they
are built once per session.  Corpus builders are plain functions (not
fixtures) because tests vary their seeds and domain-gap parameters.
"""

import numpy as np
import pytest

from promptdehaze.encoders import ToyEncoder
from promptdehaze.imaging import (
    HazeParams,
    synthesize_haze,
    synthetic_depth,
    synthetic_scene,
)
from promptdehaze.prompts import build_default_prompt_sets, ensemble_embedding

# Heavy-haze domain used for adaptation corpora; pretraining pairs use the
# lighter toy_hazy_pairs defaults, and the shift between them is the
# domain gap the finetuning stage exists to close.
FINETUNE_BETA = (1.8, 3.2)
FINETUNE_AIRLIGHT = (0.85, 0.95)


@pytest.fixture(scope="session")
def toy_encoder():
    return ToyEncoder()


@pytest.fixture(scope="session")
def default_sets():
    return build_default_prompt_sets()


@pytest.fixture(scope="session")
def default_ensembles(toy_encoder, default_sets):
    return {role: ensemble_embedding(ps, toy_encoder) for role, ps in default_sets.items()}


def make_hazy_scenes(count, seed, beta_range=FINETUNE_BETA,
                     airlight_range=FINETUNE_AIRLIGHT, size=64):
    """Heavy-haze scenes with known sky bands: [(hazy, clean, sky_rows)]."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        clean, sky_rows = synthetic_scene(seed=seed * 1000 + i, size=size)
        depth = synthetic_depth(size, size, rng, sky_rows=sky_rows)
        base = float(rng.uniform(*airlight_range))
        airlight = np.clip(
            np.array([base - 0.02, base, base + 0.04], dtype=np.float32), 0.6, 1.0
        )
        params = HazeParams(
            beta=float(rng.uniform(*beta_range)), airlight=airlight, depth=depth
        )
        out.append((synthesize_haze(clean, params), clean, sky_rows))
    return out
