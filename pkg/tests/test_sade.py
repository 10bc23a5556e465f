import pytest
import torch

from cdun.degrade import TAU_MIN
from cdun.errors import ConfigError, ContractError
from cdun.sade import SADE, ExpertAttention, SadeConfig, backbone_size, combine_experts, sample_frames


def test_sample_frames_examples():
    assert sample_frames(15, 5) == [1, 4, 7, 10, 13]
    assert sample_frames(5, 5) == [1, 2, 3, 4, 5]
    assert sample_frames(3, 5) == [1, 2, 3]
    assert sample_frames(12, 5) == [1, 3, 5, 7, 9]
    assert sample_frames(1, 1) == [1]
    with pytest.raises(ContractError):
        sample_frames(0, 5)


def test_sample_frames_bounds():
    for l in range(1, 30):
        for m in range(1, 8):
            idx = sample_frames(l, m)
            assert len(idx) == min(m, l) and idx[0] == 1 and max(idx) <= l
            assert idx == sorted(set(idx))


def test_descriptor_identical_frames_and_shape():
    model = SADE()
    frame = torch.rand(3, 20, 28)
    P, idx = model.descriptor(frame.expand(1, 7, 3, 20, 28))
    assert P.shape == (1, 5, 32) and idx == [0, 1, 2, 3, 4]
    assert torch.allclose(P[0], P[0, :1].expand(5, 32), atol=1e-6)
    P2, _ = model.descriptor(torch.rand(2, 6, 3, 40, 24))
    assert P2.shape == (2, 5, 32)


def test_expert_weights_range_permutation_duplication(gen):
    att = ExpertAttention(C=32, n=4)
    P = torch.randn(2, 5, 32, generator=gen)
    with torch.no_grad():
        W = att(P)
    assert W.shape == (2, 4) and float(W.min()) > 0 and float(W.max()) < 1
    perm = torch.randperm(5, generator=gen)
    assert (att(P[:, perm]) - W).abs().max() < 1e-6
    assert (att(torch.cat([P, P], 1)) - W).abs().max() < 1e-6


def test_combine_experts(gen):
    bank = torch.randn(4, 50, generator=gen)
    for k in range(4):
        assert torch.equal(combine_experts(torch.eye(4)[k], bank), bank[k])
    assert torch.equal(combine_experts(torch.zeros(4), bank), torch.zeros(50))
    w1, w2 = torch.rand(4, generator=gen), torch.rand(4, generator=gen)
    a, b = 0.7, -1.3
    lhs = combine_experts(a * w1 + b * w2, bank)
    assert (lhs - (a * combine_experts(w1, bank) + b * combine_experts(w2, bank))).abs().max() < 1e-7 * 50
    with pytest.raises(ContractError):
        combine_experts(torch.rand(3), bank)


def test_estimate_shapes_positivity_and_single_theta(gen):
    model = SADE().eval()
    clip = torch.rand(6, 3, 16, 16, generator=gen)
    with torch.no_grad():
        T, D, theta = model(clip, return_theta=True)
    assert T.shape == D.shape == (6, 1, 16, 16)
    assert theta.shape == (backbone_size(),)
    assert float(T.min()) >= TAU_MIN and float(D.min()) >= 0
    f = model.estimate(clip)
    assert torch.equal(f.T, T)


def test_one_theta_per_clip_reproduces_every_frame(gen):
    """Each frame run alone under the clip's Theta matches the clip-level output."""
    from cdun.sade import run_backbone

    model = SADE().eval()
    clip = torch.rand(1, 5, 3, 16, 16, generator=gen)
    with torch.no_grad():
        T, D, theta = model(clip, return_theta=True)
        for i in range(5):
            raw = run_backbone(clip[:, i:i + 1].transpose(0, 1), theta, model.cfg.width, model.cfg.levels)
            Ti, Di = model.maps(raw.transpose(0, 1))
            assert torch.allclose(Ti, T[:, i:i + 1], atol=1e-6) and torch.allclose(Di, D[:, i:i + 1], atol=1e-6)


def test_batched_clips_independent(gen):
    model = SADE().eval()
    clips = torch.rand(3, 5, 3, 16, 16, generator=gen)
    with torch.no_grad():
        T, D = model(clips)
        T1, D1 = model(clips[1])
    assert torch.allclose(T[1], T1, atol=1e-6) and torch.allclose(D[1], D1, atol=1e-6)


def test_deterministic(gen):
    model = SADE().eval()
    clip = torch.rand(4, 3, 16, 16, generator=gen)
    with torch.no_grad():
        assert all(torch.equal(a, b) for a, b in zip(model(clip), model(clip)))


def test_framewise_ablation_one_theta_per_frame(gen):
    model = SADE(SadeConfig(framewise=True)).eval()
    clip = torch.rand(2, 4, 3, 16, 16, generator=gen)
    T, D, theta = model(clip, return_theta=True)
    assert theta.shape == (2, 4, backbone_size()) and T.shape == (2, 4, 1, 16, 16)
    assert not torch.equal(theta[0, 0], theta[0, 1])


def test_checkpoint_round_trip(tmp_path, gen):
    model = SADE(SadeConfig(m=3))
    model.save(tmp_path)
    back = SADE.load(tmp_path)
    assert back.cfg == model.cfg
    clip = torch.rand(4, 3, 16, 16, generator=gen)
    with torch.no_grad():
        assert torch.equal(model(clip)[0], back(clip)[0])
    with pytest.raises(ConfigError):
        SADE.load(tmp_path / "missing")


def test_config_validation():
    with pytest.raises(ConfigError):
        SadeConfig(n=0)
    with pytest.raises(ConfigError):
        SadeConfig(levels=4)
