import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vqapipe import checkpoint
from vqapipe.core import PatchDodecuplet
from vqapipe.errors import ConfigurationError, ModeError, ShapeError
from vqapipe.pqanet import (FULL_CHANNELS, PQAConfig, PQANet, STLevel, channel_normalize, extract_pyramid,
                            level_tokens, mean_level_score, patch_score, patch_tensor, residual_map, st_level_score)

from gradcheck import directional_check

# NR tiny network, torch seed 0, patch from numpy seed 7; recorded from the first build
GOLDEN_NR_SCORE = 0.0010707234032452106


def _patch(seed=0, origin=("p", 0, 0, 0)):
    rng = np.random.default_rng(seed)
    return PatchDodecuplet(rng.integers(0, 256, (256, 256, 3, 12)).astype(np.float32) / 255, origin)


@pytest.fixture(scope="module")
def nr_model():
    torch.manual_seed(0)
    return PQANet(PQAConfig.tiny("NR")).eval()


@pytest.fixture(scope="module")
def fr_model():
    torch.manual_seed(1)
    return PQANet(PQAConfig.tiny("FR")).eval()


def test_config_schedule_and_validation():
    full = PQAConfig.full()
    assert full.channels == FULL_CHANNELS and full.embed_dim == 32
    assert full.level_sides() == [128, 64, 32, 16, 8, 4]
    assert PQAConfig.tiny().channels == (4, 8, 12, 16, 24, 32)
    with pytest.raises(ConfigurationError):
        PQAConfig(channels=(16, 32, 32, 64, 96, 128))
    with pytest.raises(ConfigurationError):
        PQAConfig(mode="XR")
    with pytest.raises(ConfigurationError):
        PQAConfig.profile("huge")


def test_parameter_count_is_deterministic():
    counts = {sum(p.numel() for p in PQANet(PQAConfig.tiny("NR")).parameters()) for _ in range(2)}
    assert len(counts) == 1
    nr = next(iter(counts))
    fr = sum(p.numel() for p in PQANet(PQAConfig.tiny("FR")).parameters())
    assert fr > nr


def test_channel_normalize_examples():
    x = torch.tensor([[3.0, 4.0], [0.0, 0.0]]).T.reshape(1, 2, 2)
    out = channel_normalize(x)
    torch.testing.assert_close(out[0, :, 0], torch.tensor([0.6, 0.8]))
    assert torch.all(out[0, :, 1] == 0)


@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1e3))
@settings(max_examples=50, deadline=None)
def test_channel_normalize_norms(seed, scale):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 5, 3, 3, generator=g, dtype=torch.float64) * scale
    x[0, :, 0, 0] = 0
    norms = torch.linalg.vector_norm(channel_normalize(x), dim=1)
    assert float(norms.max()) <= 1 + 1e-6
    big = torch.linalg.vector_norm(x, dim=1) > 1e-10
    torch.testing.assert_close(norms[big], torch.ones_like(norms[big]))


def test_pyramid_shapes(nr_model):
    pyr = extract_pyramid(_patch(), nr_model)
    sides = [f.shape[-1] for f in pyr.levels]
    assert sides == [128, 64, 32, 16, 8, 4]
    assert [f.shape[1] for f in pyr.levels] == list(nr_model.cfg.channels)
    assert all(f.shape[0] == 12 for f in pyr.levels)


def test_pyramid_zero_input_zero_bias(nr_model):
    zero = PatchDodecuplet(np.zeros((256, 256, 3, 12), np.float32))
    assert all(float(f.abs().max()) == 0.0 for f in extract_pyramid(zero, nr_model).levels)


def test_pyramid_and_score_determinism(nr_model):
    p = _patch(3)
    a, b = extract_pyramid(p, nr_model), extract_pyramid(_patch(3), nr_model)
    assert all(torch.equal(x, y) for x, y in zip(a.levels, b.levels))
    assert patch_score(p, nr_model).value == patch_score(p, nr_model).value


def test_golden_value(nr_model):
    value = patch_score(_patch(7), nr_model).value
    assert abs(value - GOLDEN_NR_SCORE) < 1e-5


def test_patch_score_is_mean_of_levels(fr_model):
    p, r = _patch(1), _patch(2)
    s = patch_score(p, fr_model, r)
    assert len(s.level_scores) == 6
    assert abs(s.value - np.mean(s.level_scores)) < 1e-6
    assert s.origin == p.origin
    assert mean_level_score([1, 2, 3, 4, 5, 6]) == 3.5
    assert mean_level_score([0] * 6) == 0
    with pytest.raises(ShapeError):
        mean_level_score([1, 2])


def test_level_scores_match_st_level_score(fr_model):
    p, r = _patch(1), _patch(2)
    s = patch_score(p, fr_model, r)
    dist, ref = patch_tensor(p), patch_tensor(r)
    res = residual_map(ref, dist)
    feats = [fr_model.pyramid(t) for t in (dist, res, ref)]
    for k in (1, 4, 6):
        level = {"dist": feats[0][k - 1][0], "res": feats[1][k - 1][0], "ref": feats[2][k - 1][0]}
        assert abs(st_level_score(level, fr_model, k) - s.level_scores[k - 1]) < 1e-5
    with pytest.raises(ModeError):
        st_level_score({"dist": feats[0][0][0]}, fr_model, 1)


def test_mode_errors(fr_model, nr_model):
    p = _patch()
    with pytest.raises(ModeError):
        patch_score(p, fr_model)
    with pytest.raises(ModeError):
        patch_score(p, nr_model, p)
    with pytest.raises(ShapeError):
        nr_model(torch.zeros(1, 11, 3, 256, 256))


def test_identical_pairs_score_alike(fr_model):
    """With dist == ref the residual stream is all ones; equal content gives equal scores."""
    p = _patch(4)
    q = PatchDodecuplet(p.samples.copy(), ("other", 256, 0, 12))
    assert patch_score(p, fr_model, p).value == patch_score(q, fr_model, q).value
    res = residual_map(patch_tensor(p), patch_tensor(p))
    assert torch.all(res == 1)


def test_no_cross_patch_state(nr_model):
    a, b = _patch(5), _patch(6)
    with torch.no_grad():
        batch = nr_model(torch.cat([patch_tensor(a), patch_tensor(b)]))
    assert abs(float(batch.score[0]) - patch_score(a, nr_model).value) < 1e-5
    assert abs(float(batch.score[1]) - patch_score(b, nr_model).value) < 1e-5


def test_handcrafted_level_is_mean_of_embedding():
    """Zeroed attention and MLP outputs make the block an identity, so a head of
    1/dim weights returns the mean embedded feature."""
    cfg = PQAConfig.tiny("NR")
    level = STLevel(8, 4, cfg).double()
    with torch.no_grad():
        for p in level.block.parameters():
            p.zero_()
        level.head.weight.fill_(1.0 / cfg.embed_dim)
        level.head.bias.zero_()
    tokens = torch.randn(2, 4, 4, 8, dtype=torch.float64)
    expected = level.embed(tokens).mean(dim=(1, 2, 3))
    torch.testing.assert_close(level(tokens), expected)


def test_fr_tokens_multiply_by_residual():
    g = torch.Generator().manual_seed(0)
    d, r, ref = (torch.randn(1, 12, 2, 3, 3, generator=g) for _ in range(3))
    tok = level_tokens(d, r, ref)
    nd, nr_, nref = (level_tokens(x) for x in (d, r, ref))
    torch.testing.assert_close(tok, torch.cat([nd * nr_, nr_ * nr_, nref * nr_], dim=-1))
    with pytest.raises(ModeError):
        level_tokens(d, r, None)


def test_checkpoint_round_trip(tmp_path, fr_model):
    path = tmp_path / "m.pt"
    checkpoint.save_pqanet(path, fr_model, seed=1)
    back = checkpoint.load_pqanet(path)
    p, r = _patch(8), _patch(9)
    assert abs(patch_score(p, back, r).value - patch_score(p, fr_model, r).value) < 1e-6
    assert checkpoint.read_manifest(path, "pqanet")["window"] == 2
    with pytest.raises(ConfigurationError):
        checkpoint.load_stanet(path)


@pytest.mark.parametrize("level", range(6))
def test_fe_level_gradients_nr(level):
    torch.manual_seed(level)
    model = PQANet(PQAConfig.tiny("NR")).double()
    x = patch_tensor(_patch(level), torch.float64)
    params = list(model.fe.levels[level].parameters())
    _, _, rel = directional_check(lambda: model(x).score.sum(), params, seed=level)
    assert rel < 1e-3


def test_st_level_gradients_fr():
    torch.manual_seed(11)
    model = PQANet(PQAConfig.tiny("FR")).double()
    d, r = (patch_tensor(_patch(s), torch.float64) for s in (11, 12))
    for level in range(6):
        params = list(model.st[level].parameters())
        _, _, rel = directional_check(lambda: model(d, r).score.sum(), params, seed=level)
        assert rel < 1e-3, level


def test_unfrozen_difference_at_small_step():
    torch.manual_seed(5)
    model = PQANet(PQAConfig.tiny("NR")).double()
    x = patch_tensor(_patch(5), torch.float64)
    _, _, rel = directional_check(lambda: model(x).score.sum(), list(model.parameters()), seed=5,
                                  step=1e-7, freeze=False)
    assert rel < 1e-5
