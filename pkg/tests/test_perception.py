import numpy as np
import pytest
import torch

from metdrive.domain import ConfigurationError, GEOMETRIC, ValidationError
from metdrive.losses import gradcheck
from metdrive.perception import (
    ObservationFrame,
    PerceptionBranch,
    encode_frame,
    encode_sequence,
)


def make_branch(seed=0, **kwargs):
    torch.manual_seed(seed)
    defaults = dict(camera_hw=(8, 8), bev_hw=(8, 8), out_dim=16, desc_dim=8,
                    base_channels=2, heads=2, window_len=4)
    defaults.update(kwargs)
    return PerceptionBranch(**defaults)


def make_frame(rng, hw=(8, 8), t=0.0):
    return ObservationFrame(camera=rng.uniform(size=hw), bev=rng.uniform(size=hw), t=t)


class TestObservationFrame:
    def test_range_checked(self):
        with pytest.raises(ValidationError, match="camera"):
            ObservationFrame(camera=np.full((4, 4), 1.5), bev=np.zeros((4, 4)))

    def test_shape_checked(self):
        with pytest.raises(ValidationError, match="bev"):
            ObservationFrame(camera=np.zeros((4, 4)), bev=np.zeros(4))


class TestEncodeFrame:
    def test_output_contract(self):
        branch = make_branch(out_dim=64)
        frame = make_frame(np.random.default_rng(0))
        block = encode_frame(frame, branch)
        assert block.role == GEOMETRIC
        assert block.data.shape == (1, 64)

    def test_zero_frame_zero_bias_gives_zero_descriptors(self):
        branch = make_branch()
        with torch.no_grad():
            for backbone in (branch.camera_backbone, branch.bev_backbone):
                for m in backbone.modules():
                    if hasattr(m, "bias") and m.bias is not None:
                        m.bias.zero_()
        zeros = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        cam_desc, bev_desc = branch.descriptors(zeros, zeros)
        assert torch.all(cam_desc == 0) and torch.all(bev_desc == 0)

    def test_resolution_mismatch_rejected(self):
        branch = make_branch()
        bad = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
        with pytest.raises(ConfigurationError, match="resolution"):
            branch.camera_backbone(bad)

    def test_deterministic(self):
        branch = make_branch()
        frame = make_frame(np.random.default_rng(1))
        a = encode_frame(frame, branch)
        b = encode_frame(frame, branch)
        assert torch.equal(a.data, b.data)

    def test_fusion_weights_sum_to_one(self):
        branch = make_branch()
        rng = np.random.default_rng(2)
        cam = torch.tensor(rng.normal(size=(3, 8)))
        bev = torch.tensor(rng.normal(size=(3, 8)))
        _, weights = branch.fuse(cam, bev, return_weights=True)
        assert torch.abs(weights.sum(dim=-1) - 1.0).max() < 1e-6

    def test_finite_outputs(self):
        branch = make_branch()
        ones = torch.ones(2, 1, 8, 8, dtype=torch.float64)
        zeros = torch.zeros(2, 1, 8, 8, dtype=torch.float64)
        for cam, bev in ((ones, zeros), (zeros, ones), (ones, ones)):
            assert torch.isfinite(branch(cam, bev)).all()

    def test_gradcheck(self):
        branch = make_branch(seed=3)
        rng = np.random.default_rng(3)
        cam = torch.tensor(rng.uniform(size=(1, 1, 8, 8)))
        bev = torch.tensor(rng.uniform(size=(1, 1, 8, 8)))

        def f(*params):
            return (branch(cam, bev) ** 2).mean()

        err = gradcheck(f, list(branch.parameters()), eps=1e-5)
        assert err < 1e-4


class TestEncodeSequence:
    def test_output_contract(self):
        branch = make_branch(window_len=4, out_dim=16)
        rng = np.random.default_rng(4)
        frames = [make_frame(rng, t=0.1 * i) for i in range(4)]
        block = encode_sequence(frames, branch)
        assert block.role == GEOMETRIC and block.data.shape == (4, 16)

    def test_wrong_count_rejected(self):
        branch = make_branch(window_len=4)
        rng = np.random.default_rng(5)
        with pytest.raises(ValidationError, match="expected 4 frames"):
            encode_sequence([make_frame(rng)] * 3, branch)

    def test_duplicated_frame_rows_identical(self):
        branch = make_branch(window_len=4)
        frame = make_frame(np.random.default_rng(6))
        block = encode_sequence([frame] * 4, branch)
        for row in range(1, 4):
            assert torch.equal(block.data[row], block.data[0])

    def test_rows_match_per_frame_encoding(self):
        branch = make_branch(window_len=4)
        rng = np.random.default_rng(7)
        frames = [make_frame(rng, t=0.1 * i) for i in range(4)]
        stacked = encode_sequence(frames, branch)
        for i, frame in enumerate(frames):
            single = encode_frame(frame, branch)
            assert torch.abs(stacked.data[i] - single.data[0]).max() < 1e-12
