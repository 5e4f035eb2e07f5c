"""Loss composition oracles: breakdown identities, fidelity, ablations."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptdehaze.backbone import TinyResidualDehazer
from promptdehaze.encoders import STEM_SCALE, as_chw_tensor
from promptdehaze.imaging import RegionMask, synthetic_scene, toy_hazy_pairs
from promptdehaze.losses import (
    DEFAULT_FILL,
    LossBreakdown,
    LossWeights,
    clip_prompt_loss,
    composite_tensor,
    fidelity_loss,
    guidance_loss,
    total_loss,
)
from promptdehaze.prompts import positive_logmass


@pytest.fixture(scope="module")
def identity_model():
    return TinyResidualDehazer(channels=16, blocks=2, seed=0)


@pytest.fixture()
def scene64():
    im, sky_rows = synthetic_scene(seed=12)
    bits = np.zeros((64, 64), dtype=bool)
    bits[:sky_rows] = True
    return im, RegionMask(bits)


# ---------------------------------------------------------------------------
# weights and breakdown containers
# ---------------------------------------------------------------------------

class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2) == (0.5, 0.1)
        assert w.alpha == (1.0, 1.0, 1.0, 1.0, 0.5)

    def test_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)
        with pytest.raises(ValueError):
            LossWeights(lambda2=-1.0)
        with pytest.raises(ValueError):
            LossWeights(alpha=(1.0, 1.0))
        with pytest.raises(ValueError):
            LossWeights(alpha=(1.0, 1.0, 1.0, 1.0, -0.5))


class TestLossBreakdown:
    def make(self, sky=0.3, non_sky=0.4, enhance=0.2, fidelity=1.5, w=None):
        w = w or LossWeights()
        t = lambda v: torch.tensor(float(v))
        guidance = sky + non_sky + w.lambda1 * enhance
        total = guidance + w.lambda2 * fidelity
        return dict(
            total=t(total), guidance=t(guidance), fidelity=t(fidelity),
            sky=t(sky), non_sky=t(non_sky), enhance=t(enhance), weights=w,
        )

    def test_consistent_terms_accepted(self):
        bd = LossBreakdown(**self.make())
        vals = bd.as_floats()
        assert vals["guidance"] == pytest.approx(0.3 + 0.4 + 0.5 * 0.2, abs=1e-6)

    def test_guidance_identity_enforced(self):
        parts = self.make()
        parts["guidance"] = torch.tensor(99.0)
        parts["total"] = torch.tensor(99.0 + 0.1 * 1.5)
        with pytest.raises(ValueError):
            LossBreakdown(**parts)

    def test_total_identity_enforced(self):
        parts = self.make()
        parts["total"] = parts["total"] + 1.0
        with pytest.raises(ValueError):
            LossBreakdown(**parts)

    def test_non_finite_rejected(self):
        parts = self.make()
        parts["fidelity"] = torch.tensor(float("nan"))
        with pytest.raises(ValueError):
            LossBreakdown(**parts)


# ---------------------------------------------------------------------------
# masked composites
# ---------------------------------------------------------------------------

class TestCompositeTensor:
    def test_matches_where_oracle(self):
        x = torch.rand(3, 6, 5)
        bits = np.random.default_rng(0).random((6, 5)) < 0.5
        got = composite_tensor(x, bits, fill=(0.1, 0.2, 0.3))
        fill = torch.tensor([0.1, 0.2, 0.3]).view(3, 1, 1).expand_as(x)
        want = torch.where(torch.from_numpy(bits).unsqueeze(0), x, fill)
        assert torch.equal(got, want)

    def test_gradient_confined_to_kept_pixels(self):
        x = torch.rand(3, 4, 4, requires_grad=True)
        bits = np.zeros((4, 4), dtype=bool)
        bits[:2] = True
        composite_tensor(x, bits).sum().backward()
        g = x.grad.numpy()
        assert np.all(g[:, :2, :] == 1.0)
        assert np.all(g[:, 2:, :] == 0.0)

    def test_tensor_mask_accepted(self):
        x = torch.rand(3, 4, 4)
        m = torch.zeros(4, 4, dtype=torch.bool)
        got = composite_tensor(x, m)
        fill = torch.tensor(DEFAULT_FILL).view(3, 1, 1).expand_as(x)
        assert torch.equal(got, fill)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            composite_tensor(torch.rand(3, 4, 4), np.zeros((5, 5), dtype=bool))

    def test_readonly_mask_accepted(self):
        x = torch.rand(3, 4, 4)
        bits = np.ones((4, 4), dtype=bool)
        bits.setflags(write=False)
        assert torch.equal(composite_tensor(x, bits), x)


# ---------------------------------------------------------------------------
# prompt loss
# ---------------------------------------------------------------------------

class TestClipPromptLoss:
    def test_neg_log_pos_oracle(self, toy_encoder, default_ensembles):
        im, _ = synthetic_scene(seed=13)
        prompts = default_ensembles["enhance"]
        loss = clip_prompt_loss(im, prompts, toy_encoder)
        emb = toy_encoder.encode_image(im)
        want = -positive_logmass(emb.vector, prompts, 1.0)
        assert float(loss) == pytest.approx(float(want), abs=1e-9)
        assert float(loss) > 0.0

    def test_orientations_are_linked(self, toy_encoder, default_ensembles):
        im, _ = synthetic_scene(seed=14)
        prompts = default_ensembles["non_sky"]
        nlp = clip_prompt_loss(im, prompts, toy_encoder, orientation="neg-log-pos")
        lit = clip_prompt_loss(im, prompts, toy_encoder, orientation="literal-pos")
        assert float(lit) == pytest.approx(math.exp(-float(nlp)), abs=1e-6)
        assert 0.0 < float(lit) < 1.0

    def test_unknown_orientation_raises(self, toy_encoder, default_ensembles):
        im, _ = synthetic_scene(seed=15)
        with pytest.raises(ValueError):
            clip_prompt_loss(im, default_ensembles["sky"], toy_encoder, orientation="flip")

    def test_hazy_scores_worse_than_clean(self, toy_encoder, default_ensembles):
        prompts = default_ensembles["enhance"]
        worse = 0
        pairs = toy_hazy_pairs(10, seed=31)
        for hazy, clean in pairs:
            lh = float(clip_prompt_loss(hazy, prompts, toy_encoder))
            lc = float(clip_prompt_loss(clean, prompts, toy_encoder))
            worse += lh > lc
        assert worse >= 9

    def test_differentiable_wrt_image(self, toy_encoder, default_ensembles):
        x = torch.rand(3, 64, 64, dtype=torch.float64, requires_grad=True)
        loss = clip_prompt_loss(x, default_ensembles["enhance"], toy_encoder)
        loss.backward()
        assert torch.isfinite(x.grad).all()


# ---------------------------------------------------------------------------
# fidelity loss
# ---------------------------------------------------------------------------

class TestFidelityLoss:
    def test_identical_images_give_exact_zero(self, toy_encoder):
        im, _ = synthetic_scene(seed=16)
        loss = fidelity_loss(im, im, toy_encoder)
        assert float(loss) == 0.0

    def test_gradient_at_zero_is_zero_not_nan(self, toy_encoder):
        x = torch.rand(3, 64, 64, dtype=torch.float64)
        y = x.clone().requires_grad_(True)
        fidelity_loss(x, y, toy_encoder).backward()
        assert torch.isfinite(y.grad).all()
        assert float(y.grad.abs().max()) == 0.0

    def test_first_layer_closed_form(self, toy_encoder):
        # Layer 0 is the scaled image itself, so alpha=(1,0,0,0,0) reduces
        # to STEM_SCALE times the Frobenius distance of the two images.
        a, _ = synthetic_scene(seed=17)
        b, _ = synthetic_scene(seed=18)
        loss = fidelity_loss(a, b, toy_encoder, alpha=(1.0, 0.0, 0.0, 0.0, 0.0))
        diff = as_chw_tensor(a) - as_chw_tensor(b)
        want = STEM_SCALE * float(torch.linalg.vector_norm(diff))
        assert float(loss) == pytest.approx(want, rel=1e-6)

    def test_alpha_scales_linearly(self, toy_encoder):
        a, _ = synthetic_scene(seed=19)
        b, _ = synthetic_scene(seed=20)
        base = float(fidelity_loss(a, b, toy_encoder, alpha=(1.0, 1.0, 1.0, 1.0, 0.5)))
        doubled = float(fidelity_loss(a, b, toy_encoder, alpha=(2.0, 2.0, 2.0, 2.0, 1.0)))
        assert doubled == pytest.approx(2.0 * base, rel=1e-6)

    def test_sum_over_layers_oracle(self, toy_encoder):
        a, _ = synthetic_scene(seed=21)
        b, _ = synthetic_scene(seed=22)
        alpha = (1.0, 1.0, 1.0, 1.0, 0.5)
        fa = toy_encoder.image_layer_features(a)
        fb = toy_encoder.image_layer_features(b)
        want = sum(
            w * float(torch.linalg.vector_norm(ta - tb))
            for w, ta, tb in zip(alpha, fa.layers, fb.layers)
        )
        got = float(fidelity_loss(a, b, toy_encoder, alpha=alpha))
        assert got == pytest.approx(want, rel=1e-6)

    def test_alpha_length_validated(self, toy_encoder):
        im, _ = synthetic_scene(seed=23)
        with pytest.raises(ValueError):
            fidelity_loss(im, im, toy_encoder, alpha=(1.0,))


# ---------------------------------------------------------------------------
# total loss composition
# ---------------------------------------------------------------------------

class TestTotalLoss:
    def test_identity_model_zeroes_fidelity(
        self, toy_encoder, default_ensembles, identity_model, scene64
    ):
        im, mask = scene64
        bd = total_loss(im, mask, identity_model, default_ensembles, toy_encoder)
        vals = bd.as_floats()
        assert vals["fidelity"] == 0.0
        assert vals["total"] == pytest.approx(vals["guidance"], abs=1e-12)

    def test_terms_match_hand_composition(
        self, toy_encoder, default_ensembles, identity_model, scene64
    ):
        im, mask = scene64
        bd = total_loss(im, mask, identity_model, default_ensembles, toy_encoder)
        x = as_chw_tensor(im)  # identity model: output == input
        sky = float(clip_prompt_loss(
            composite_tensor(x, mask.bits), default_ensembles["sky"], toy_encoder))
        non = float(clip_prompt_loss(
            composite_tensor(x, ~mask.bits), default_ensembles["non_sky"], toy_encoder))
        enh = float(clip_prompt_loss(x, default_ensembles["enhance"], toy_encoder))
        vals = bd.as_floats()
        assert vals["sky"] == pytest.approx(sky, abs=1e-7)
        assert vals["non_sky"] == pytest.approx(non, abs=1e-7)
        assert vals["enhance"] == pytest.approx(enh, abs=1e-7)
        assert vals["guidance"] == pytest.approx(sky + non + 0.5 * enh, abs=1e-6)

    def test_region_split_off_zeroes_sky(
        self, toy_encoder, default_ensembles, identity_model, scene64
    ):
        im, mask = scene64
        bd = total_loss(
            im, mask, identity_model, default_ensembles, toy_encoder, region_split=False
        )
        vals = bd.as_floats()
        assert vals["sky"] == 0.0
        x = as_chw_tensor(im)
        want = float(clip_prompt_loss(x, default_ensembles["non_sky"], toy_encoder))
        assert vals["non_sky"] == pytest.approx(want, abs=1e-7)

    def test_enhance_off_zeroes_enhance(
        self, toy_encoder, default_ensembles, identity_model, scene64
    ):
        im, mask = scene64
        bd = total_loss(
            im, mask, identity_model, default_ensembles, toy_encoder, enhance_set=False
        )
        vals = bd.as_floats()
        assert vals["enhance"] == 0.0
        assert vals["guidance"] == pytest.approx(vals["sky"] + vals["non_sky"], abs=1e-6)

    def test_all_false_mask_zeroes_sky_term(
        self, toy_encoder, default_ensembles, identity_model
    ):
        im, _ = synthetic_scene(seed=24)
        bd = total_loss(
            im, RegionMask.all_false(64, 64), identity_model,
            default_ensembles, toy_encoder,
        )
        assert bd.as_floats()["sky"] == 0.0

    def test_mask_modes_agree_on_identity_model(
        self, toy_encoder, default_ensembles, identity_model, scene64
    ):
        # identity output makes mask-then-forward equal forward-then-mask
        im, mask = scene64
        a = total_loss(im, mask, identity_model, default_ensembles, toy_encoder,
                       region_mode="mask-output").as_floats()
        b = total_loss(im, mask, identity_model, default_ensembles, toy_encoder,
                       region_mode="mask-input").as_floats()
        for key in a:
            assert a[key] == pytest.approx(b[key], abs=1e-7)

    def test_mask_modes_differ_on_non_identity_model(
        self, toy_encoder, default_ensembles, scene64
    ):
        im, mask = scene64
        model = TinyResidualDehazer(channels=16, blocks=2, seed=1, zero_init_final=False)
        a = total_loss(im, mask, model, default_ensembles, toy_encoder,
                       region_mode="mask-output").as_floats()
        b = total_loss(im, mask, model, default_ensembles, toy_encoder,
                       region_mode="mask-input").as_floats()
        assert abs(a["sky"] - b["sky"]) > 1e-6

    def test_unknown_region_mode_raises(
        self, toy_encoder, default_ensembles, identity_model, scene64
    ):
        im, mask = scene64
        with pytest.raises(ValueError):
            total_loss(im, mask, identity_model, default_ensembles, toy_encoder,
                       region_mode="crop")

    def test_mask_shape_mismatch_raises(
        self, toy_encoder, default_ensembles, identity_model
    ):
        im, _ = synthetic_scene(seed=25)
        with pytest.raises(ValueError):
            total_loss(im, RegionMask.all_true(32, 32), identity_model,
                       default_ensembles, toy_encoder)

    def test_guidance_loss_returns_guidance_term(
        self, toy_encoder, default_ensembles, identity_model, scene64
    ):
        im, mask = scene64
        g = guidance_loss(im, mask, identity_model, default_ensembles, toy_encoder)
        bd = total_loss(im, mask, identity_model, default_ensembles, toy_encoder)
        assert float(g) == pytest.approx(bd.as_floats()["guidance"], abs=1e-9)

    def test_backward_reaches_model_parameters(
        self, toy_encoder, default_ensembles, scene64
    ):
        im, mask = scene64
        model = TinyResidualDehazer(channels=16, blocks=2, seed=2, zero_init_final=False)
        bd = total_loss(im, mask, model, default_ensembles, toy_encoder)
        bd.total.backward()
        grads = [p.grad for p in model.parameters()]
        assert all(g is not None for g in grads)
        assert any(float(g.abs().max()) > 0 for g in grads)

    @given(
        st.floats(0.0, 2.0),
        st.floats(0.0, 2.0),
        st.lists(st.floats(0.0, 2.0), min_size=5, max_size=5),
    )
    @settings(max_examples=10, deadline=None)
    def test_property_composition_identities(self, lam1, lam2, alpha):
        # identities must hold for any admissible weights, not just defaults
        from promptdehaze.encoders import ToyEncoder
        from promptdehaze.prompts import build_default_prompt_sets, ensemble_embedding

        enc = ToyEncoder()
        sets = {r: ensemble_embedding(ps, enc)
                for r, ps in build_default_prompt_sets().items()}
        model = TinyResidualDehazer(channels=16, blocks=2, seed=3, zero_init_final=False)
        im, sky_rows = synthetic_scene(seed=26)
        bits = np.zeros((64, 64), dtype=bool)
        bits[:sky_rows] = True
        w = LossWeights(lambda1=lam1, lambda2=lam2, alpha=tuple(alpha))
        vals = total_loss(im, RegionMask(bits), model, sets, enc, w).as_floats()
        assert vals["guidance"] == pytest.approx(
            vals["sky"] + vals["non_sky"] + lam1 * vals["enhance"], abs=1e-6)
        assert vals["total"] == pytest.approx(
            vals["guidance"] + lam2 * vals["fidelity"], abs=1e-6)
