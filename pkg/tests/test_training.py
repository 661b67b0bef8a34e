import numpy as np
import pytest
import torch

from metdrive import losses
from metdrive.domain import ConfigurationError
from metdrive.model import MODE_DECOMPOSED, MODE_PAIRED, MODE_RAW
from metdrive.synthworld import WorldConfig, load_dataset, make_dataset
from metdrive.training import (
    ExperimentConfig,
    ablation_inputs,
    apply_overrides,
    evaluate_imitation,
    parse_config_file,
    train,
)
from tests.test_domain import make_sequence

TINY_KW = dict(window_len=4, waypoints=4, embed_dim=8, temporal_dim=8, geometric_dim=8,
               gru_hidden=8, heads=2, desc_dim=8, base_channels=2,
               camera_h=8, camera_w=8, bev_h=8, bev_w=8)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "train"
    base = WorldConfig(camera_hw=(8, 8), bev_hw=(8, 8))
    make_dataset(2, 31, base, out, window_len=4, waypoints=4, stride=3,
                 difficulty_mix=(0, 1))
    samples, meta = load_dataset(out)
    return samples


class TestConfig:
    def test_parse_file(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("# comment\nmodel.embed_dim = 16\ntrain.lr=5e-4\n\n"
                     "loss.temporal_loss_on = false\nmodel.input_mode=raw_theta_u_psi\n")
        cfg = ExperimentConfig.from_flat(parse_config_file(p))
        assert cfg.embed_dim == 16
        assert cfg.lr == 5e-4
        assert cfg.temporal_loss_on is False
        assert cfg.input_mode == "raw_theta_u_psi"

    def test_bad_line_rejected(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("no equals sign here\n")
        with pytest.raises(ConfigurationError, match="key = value"):
            parse_config_file(p)

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigurationError, match="train.epochs"):
            ExperimentConfig.from_flat({"train.epochs": "three"})

    def test_overrides_round_trip(self):
        flat = {"model.embed_dim": "32", "custom.key": "7"}
        merged = apply_overrides(flat, ["model.embed_dim=16", "train.seed=9"])
        cfg = ExperimentConfig.from_flat(merged)
        assert cfg.embed_dim == 16 and cfg.seed == 9
        out = cfg.to_flat()
        assert out["model.embed_dim"] == 16
        assert out["train.seed"] == 9
        assert out["custom.key"] == "7"

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError, match="input mode"):
            ExperimentConfig(input_mode="bogus")


class TestAblationInputs:
    def test_decomposed_delegates(self):
        from metdrive.ego_temporal import decompose

        seq = make_sequence(8)
        x, y = ablation_inputs(MODE_DECOMPOSED, seq)
        dx, dy = decompose(seq)
        assert np.array_equal(x, dx) and np.array_equal(y, dy)

    def test_raw_mode_three_streams(self):
        seq = make_sequence(8, theta=np.random.default_rng(0).uniform(0.2, 1.0, 8))
        x, y = ablation_inputs(MODE_RAW, seq)
        assert y is None and x.shape == (3, 8)
        assert not np.allclose(x[0], np.cos(seq.theta))

    def test_paired_mode_verbatim(self):
        seq = make_sequence(8, theta=np.random.default_rng(1).normal(size=8))
        x, y = ablation_inputs(MODE_PAIRED, seq)
        fields = [seq.theta, seq.steer, seq.delta[:, 0], seq.throttle, seq.delta[:, 1]]
        got = [x[0], x[1], x[2], y[0], y[1]]
        for a, b in zip(got, fields):
            assert np.array_equal(a, b)


class TestTrain:
    def make_cfg(self, **overrides):
        kw = dict(TINY_KW, epochs=2, batch_size=8, lr=1e-3, seed=0)
        kw.update(overrides)
        return ExperimentConfig(**kw)

    def test_loss_reduction_after_50_steps(self, small_dataset):
        samples = small_dataset[:64]
        # 8 batches/epoch at batch 8 -> 7 epochs ~ 56 steps
        cfg = self.make_cfg(epochs=7, temporal_loss_on=False)
        torch.manual_seed(cfg.seed)
        from metdrive.model import build_model

        init_model = build_model(cfg.to_flat(), seed=cfg.seed)
        initial = evaluate_imitation(init_model, samples)
        result = train(cfg, samples=samples)
        final = evaluate_imitation(result.model, samples)
        assert final <= 0.7 * initial

    def test_temporal_loss_switch_honored(self, small_dataset, monkeypatch):
        samples = small_dataset[:16]
        calls = {"n": 0}
        orig = losses.temporal_guidance_loss

        def counting(*args, **kwargs):
            calls["n"] += 1
            return orig(*args, **kwargs)

        monkeypatch.setattr(losses, "temporal_guidance_loss", counting)
        train(self.make_cfg(epochs=1, temporal_loss_on=False), samples=samples)
        assert calls["n"] == 0
        train(self.make_cfg(epochs=1, temporal_loss_on=True), samples=samples)
        assert calls["n"] > 0

    def test_same_seed_bit_identical(self, small_dataset):
        samples = small_dataset[:24]
        cfg = self.make_cfg(epochs=2)
        a = train(cfg, samples=samples)
        b = train(cfg, samples=samples)
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(pa, pb)
        assert a.curve == b.curve

    def test_different_seed_differs(self, small_dataset):
        samples = small_dataset[:24]
        a = train(self.make_cfg(seed=0, epochs=1), samples=samples)
        b = train(self.make_cfg(seed=1, epochs=1), samples=samples)
        same = all(torch.equal(pa, pb)
                   for pa, pb in zip(a.model.parameters(), b.model.parameters()))
        assert not same

    def test_loss_curve_finite_and_complete(self, small_dataset):
        cfg = self.make_cfg(epochs=3)
        result = train(cfg, samples=small_dataset[:24])
        assert len(result.curve) == 3
        assert all(np.isfinite(r["loss"]) for r in result.curve)

    def test_gradient_flow_into_every_module(self, small_dataset):
        cfg = self.make_cfg(epochs=1, batch_size=4)
        samples = small_dataset[:4]
        torch.manual_seed(cfg.seed)
        from metdrive.model import build_model

        before = {name: p.detach().clone()
                  for name, p in build_model(cfg.to_flat(), seed=cfg.seed).named_parameters()}
        result = train(cfg, samples=samples)
        changed_groups = set()
        for name, p in result.model.named_parameters():
            if not torch.equal(before[name], p):
                changed_groups.add(name.split(".")[0] + "." + name.split(".")[1])
        for group in ("temporal.embed_x", "temporal.encoder_x", "temporal.fuse",
                      "perception.camera_backbone", "perception.fusion_attn",
                      "decoder.cell", "decoder.out"):
            assert group in changed_groups, f"no parameter changed in {group}"

    def test_checkpoint_artifacts_written(self, small_dataset, tmp_path):
        cfg = self.make_cfg(epochs=1)
        result = train(cfg, samples=small_dataset[:16], out_dir=tmp_path)
        assert result.checkpoint_path is not None
        from metdrive.model import load_checkpoint

        loaded, config, epoch, _ = load_checkpoint(result.checkpoint_path)
        assert epoch == 1
        batch_cfg = ExperimentConfig.from_flat(config)
        assert batch_cfg.embed_dim == cfg.embed_dim
        assert (tmp_path / "loss_curve.jsonl").exists()

    def test_checkpoint_round_trip_bit_identical_on_probe(self, small_dataset, tmp_path):
        from metdrive.model import load_checkpoint, samples_to_tensors

        cfg = self.make_cfg(epochs=1)
        result = train(cfg, samples=small_dataset[:16], out_dir=tmp_path)
        loaded, _, _, _ = load_checkpoint(result.checkpoint_path)
        probe = samples_to_tensors(small_dataset[:4], cfg.input_mode)
        a, _, _ = result.model(probe["camera"], probe["bev"], probe["streams_x"],
                               probe["streams_y"], probe["target"])
        b, _, _ = loaded(probe["camera"], probe["bev"], probe["streams_x"],
                         probe["streams_y"], probe["target"])
        assert torch.equal(a, b)
