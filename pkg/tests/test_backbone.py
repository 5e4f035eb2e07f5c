"""Backbone contract: identity init, smoothness, registry, checkpoints."""

import numpy as np
import pytest
import torch

from promptdehaze.backbone import (
    Checkpoint,
    CheckpointError,
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    TinyResidualDehazer,
    build_backbone,
    load_checkpoint,
    register_backbone,
    save_checkpoint,
)
from promptdehaze.encoders import as_chw_tensor
from promptdehaze.imaging import synthetic_scene


class TestTinyResidualDehazer:
    def test_identity_at_init_is_bit_exact(self):
        model = TinyResidualDehazer(channels=16, blocks=2, seed=0)
        x = torch.rand(3, 32, 48)
        assert torch.equal(model.forward_t(x), x)

    def test_non_zero_init_changes_output(self):
        model = TinyResidualDehazer(channels=16, blocks=2, seed=0, zero_init_final=False)
        x = torch.rand(3, 32, 32)
        assert not torch.equal(model.forward_t(x), x)

    def test_parameter_count_closed_form(self):
        # head 3->16 (3x3): 16*3*9+16=448; each body 16->16: 16*16*9+16=2320;
        # final 16->3: 3*16*9+3=435.
        model = TinyResidualDehazer(channels=16, blocks=2, seed=0)
        assert sum(p.numel() for p in model.parameters()) == 448 + 2 * 2320 + 435

    def test_spatial_size_preserved(self):
        model = TinyResidualDehazer(channels=8, blocks=1, seed=0)
        for h, w in ((16, 16), (33, 47), (64, 64)):
            assert model.forward_t(torch.rand(3, h, w)).shape == (3, h, w)

    def test_seed_controls_init_deterministically(self):
        a = TinyResidualDehazer(channels=16, blocks=2, seed=5, zero_init_final=False)
        b = TinyResidualDehazer(channels=16, blocks=2, seed=5, zero_init_final=False)
        c = TinyResidualDehazer(channels=16, blocks=2, seed=6, zero_init_final=False)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert any(
            not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters())
        )

    def test_init_does_not_disturb_global_rng(self):
        torch.manual_seed(7)
        want = torch.rand(4)
        torch.manual_seed(7)
        TinyResidualDehazer(channels=16, blocks=2, seed=99)
        assert torch.equal(torch.rand(4), want)

    def test_bad_shapes_rejected(self):
        model = TinyResidualDehazer(channels=8, blocks=1, seed=0)
        with pytest.raises(ValueError):
            model.forward_t(torch.rand(1, 3, 16, 16))
        with pytest.raises(ValueError):
            model.forward_t(torch.rand(4, 16, 16))

    def test_constructor_validation(self):
        with pytest.raises(ValueError):
            TinyResidualDehazer(channels=4)
        with pytest.raises(ValueError):
            TinyResidualDehazer(blocks=0)

    def test_dehaze_image_clamps_and_detaches(self):
        model = TinyResidualDehazer(channels=16, blocks=2, seed=3, zero_init_final=False)
        im, _ = synthetic_scene(seed=1)
        out = model.dehaze_image(im)
        assert out.pixels.shape == im.pixels.shape
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_forward_is_smooth_in_float64(self):
        # finite-difference consistency at one coordinate, h=1e-6
        model = TinyResidualDehazer(channels=8, blocks=1, seed=4,
                                    zero_init_final=False).double()
        x = torch.rand(3, 16, 16, dtype=torch.float64, requires_grad=True)
        y = model.forward_t(x).sum()
        y.backward()
        g = x.grad[1, 5, 5].item()
        h = 1e-6
        xp = x.detach().clone(); xp[1, 5, 5] += h
        xm = x.detach().clone(); xm[1, 5, 5] -= h
        num = (model.forward_t(xp).sum() - model.forward_t(xm).sum()).item() / (2 * h)
        assert g == pytest.approx(num, rel=1e-5)

    def test_metadata(self):
        model = TinyResidualDehazer(channels=16, blocks=2, seed=0)
        md = model.metadata()
        assert md["name"] == "tiny"
        assert md["config"]["channels"] == 16
        assert md["parameters"] == 5523


class TestRegistry:
    def test_build_tiny(self):
        model = build_backbone("tiny", channels=8, blocks=1, seed=2)
        assert isinstance(model, TinyResidualDehazer)
        assert model.config["channels"] == 8

    def test_unknown_name_raises(self):
        with pytest.raises(LookupError):
            build_backbone("resnet-900")

    def test_duplicate_registration_raises(self):
        with pytest.raises(ValueError):
            register_backbone("tiny", lambda **kw: None)


class TestCheckpoint:
    def make_model(self):
        return TinyResidualDehazer(channels=16, blocks=2, seed=8, zero_init_final=False)

    def test_stage_validated(self):
        with pytest.raises(ValueError):
            Checkpoint(model=self.make_model(), stage="warmup")

    def test_round_trip_is_forward_bit_exact(self, tmp_path):
        model = self.make_model()
        ckpt = Checkpoint(
            model=model, stage="pretrained",
            encoder_metadata={"name": "toy"}, train_config={"epochs": 3},
        )
        path = tmp_path / "model.pt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.stage == "pretrained"
        assert loaded.encoder_metadata == {"name": "toy"}
        assert loaded.train_config == {"epochs": 3}
        assert loaded.version == CHECKPOINT_VERSION
        im, _ = synthetic_scene(seed=2)
        x = as_chw_tensor(im)
        with torch.no_grad():
            assert torch.equal(loaded.model.forward_t(x), model.forward_t(x))

    def test_state_dict_round_trip_exact(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.pt"
        Checkpoint(model=model, stage="finetuned").save(path)
        loaded = load_checkpoint(path)
        for k, v in model.state_dict().items():
            assert torch.equal(loaded.model.state_dict()[k], v)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.pt")

    def test_non_checkpoint_payload_rejected(self, tmp_path):
        path = tmp_path / "junk.pt"
        torch.save({"format": "something.else"}, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "corrupt.pt"
        path.write_bytes(b"not a torch file at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_version_rejected(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.pt"
        payload = {
            "format": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION + 1,
            "stage": "pretrained",
            "backbone_name": model.name,
            "backbone_config": dict(model.config),
            "state_dict": model.state_dict(),
        }
        torch.save(payload, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unknown_backbone_in_payload_rejected(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "model.pt"
        payload = {
            "format": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "stage": "pretrained",
            "backbone_name": "missing-arch",
            "backbone_config": {},
            "state_dict": model.state_dict(),
        }
        torch.save(payload, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_nested_directory_created(self, tmp_path):
        path = tmp_path / "a" / "b" / "model.pt"
        Checkpoint(model=self.make_model(), stage="pretrained").save(path)
        assert load_checkpoint(path).stage == "pretrained"
