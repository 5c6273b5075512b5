import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from uapkit.core import Perturbation
from uapkit.refinement import RefineConfig, choose_threshold, refine
from uapkit.saliency import WeightedAttentionImage


def _attn(values, n=None):
    values = np.asarray(values, dtype=np.float64)
    return WeightedAttentionImage(values, int(values.max()) if n is None else n)


def test_direct_application():
    p = Perturbation(torch.tensor([[[2.0], [-4.0]]]), 10.0, "mid")
    out = refine(p, _attn([[5, 1]]), RefineConfig(1.5, 0.5, T=3, reproject=False))
    assert out.delta.flatten().tolist() == [3.0, -2.0]
    assert out.stage == "fin"


def test_boundary_value_scaled_by_alpha():
    p = Perturbation(torch.tensor([[[2.0], [2.0]]]), 10.0, "mid")
    out = refine(p, _attn([[3, 2]]), RefineConfig(1.5, 0.5, T=3, reproject=False))
    assert out.delta.flatten().tolist() == [3.0, 1.0]


def test_reprojection_clips_to_budget():
    p = Perturbation(torch.tensor([[[8.0]]]), 10.0, "mid")
    out = refine(p, _attn([[1]]), RefineConfig(1.5, 0.5, T=0))
    assert out.delta.item() == 10.0


def test_channels_share_the_decision():
    p = Perturbation(torch.ones(1, 2, 3), 10.0, "mid")
    out = refine(p, _attn([[4, 0]]), RefineConfig(2.0, 0.5, T=1, reproject=False))
    assert out.delta[0, 0].tolist() == [2.0] * 3 and out.delta[0, 1].tolist() == [0.5] * 3


def test_errors_and_warnings(caplog):
    p = Perturbation(torch.ones(2, 2, 1), 10.0, "mid")
    with pytest.raises(ValueError):
        refine(p, _attn(np.ones((3, 2))))
    with pytest.raises(ValueError):
        refine(Perturbation(torch.ones(2, 2, 1), 10.0, "fin"), _attn(np.ones((2, 2))))
    refine(p, _attn(np.ones((2, 2)), n=1), RefineConfig(T=5.0))
    assert "outside" in caplog.text


@pytest.mark.parametrize("alpha, beta", [(1.0, 0.5), (1.5, 1.0), (1.5, 0.0), (0.5, 0.5)])
def test_config_inequalities(alpha, beta):
    with pytest.raises(ValueError):
        RefineConfig(alpha, beta)


def test_threshold_median():
    assert choose_threshold(_attn([[0, 0], [4, 4]])) == 2.0
    assert choose_threshold(_attn(np.arange(1, 10).reshape(3, 3))) == 5.0


def test_constant_attention_amplifies_everything():
    attn = _attn(np.full((2, 2), 3.0))
    assert choose_threshold(attn) == 3.0
    p = Perturbation(torch.ones(2, 2, 1), 10.0, "mid")
    out = refine(p, attn, RefineConfig(1.2, 0.8, reproject=False))
    assert torch.allclose(out.delta, torch.full((2, 2, 1), 1.2))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.01, 3.0), st.floats(0.05, 0.99))
def test_sign_partition_and_magnitude(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    delta = torch.from_numpy(rng.uniform(-10, 10, (5, 6, 3)))
    delta[delta == 0] = 1.0
    attn = _attn(rng.integers(0, 8, (5, 6)), n=8)
    p = Perturbation(delta, 10.0, "mid")
    out = refine(p, attn, RefineConfig(alpha, beta, reproject=False)).delta
    assert torch.equal(torch.sign(out), torch.sign(delta))
    ratio = (out / delta).numpy()
    hot = (attn.values >= choose_threshold(attn))[:, :, None].repeat(3, axis=2)
    np.testing.assert_allclose(ratio[hot], alpha, rtol=1e-12)
    np.testing.assert_allclose(ratio[~hot], beta, rtol=1e-12)
    assert (out.abs()[torch.from_numpy(hot)] >= delta.abs()[torch.from_numpy(hot)]).all()
    assert (out.abs()[torch.from_numpy(~hot)] <= delta.abs()[torch.from_numpy(~hot)]).all()
    projected = refine(p, attn, RefineConfig(alpha, beta))
    assert projected.linf() <= 10.0
