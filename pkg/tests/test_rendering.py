import math

import numpy as np
import pytest
import torch

from crend.rendering import RenderingHead, build_hybrid, render, rendering_loss
from oracles import bce_sum_loop


def test_one_hidden_unit_forward_by_hand():
    head = RenderingHead(in_features=2, hidden_width=1, n_classes=2).double()
    with torch.no_grad():
        head.hidden.weight[:] = torch.tensor([[0.5, -1.0]])
        head.hidden.bias[:] = 0.25
        head.out.weight[:] = torch.tensor([[2.0], [-3.0]])
        head.out.bias[:] = torch.tensor([0.1, 0.2])
    x = torch.tensor([[1.5, 0.2]], dtype=torch.float64)
    h = max(0.0, 0.5 * 1.5 - 1.0 * 0.2 + 0.25)
    expected = [1 / (1 + math.exp(-(2.0 * h + 0.1))), 1 / (1 + math.exp(-(-3.0 * h + 0.2)))]
    out = render(x, head)
    np.testing.assert_allclose(out.detach().numpy()[0], expected, atol=1e-12)


def test_head_output_shape_and_range():
    head = RenderingHead()
    out = head.render(torch.randn(17, 98))
    assert out.shape == (17, 2)
    assert torch.all((out >= 0) & (out <= 1))


def test_build_hybrid_layout():
    coarse = torch.rand(2, 8, 8, 4, dtype=torch.float64)
    fine = torch.rand(96, 4, 4, 2, dtype=torch.float64)
    coords = np.random.default_rng(0).random((5, 3))
    hyb = build_hybrid(coarse, fine, coords)
    assert hyb.shape == (5, 98)
    # voxel-centre coordinates return the stored coarse values exactly
    corner = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    hyb = build_hybrid(coarse, fine, corner)
    torch.testing.assert_close(hyb[0, :2], coarse[:, 0, 0, 0])
    torch.testing.assert_close(hyb[1, 2:], fine[:, -1, -1, -1])


def test_build_hybrid_rejects_wrong_channels():
    with pytest.raises(ValueError, match="96 fine"):
        build_hybrid(torch.rand(2, 4, 4, 4), torch.rand(64, 2, 2, 2), np.zeros((1, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_rendering_loss_matches_loop(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((7, 2))
    y = rng.integers(0, 2, (7, 2))
    loss, n = rendering_loss(torch.from_numpy(p), torch.from_numpy(y))
    assert n == 7
    assert float(loss) == pytest.approx(bce_sum_loop(p.tolist(), y.tolist()), abs=1e-9)


def test_perfect_prediction_is_near_zero_and_clamped():
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    loss, _ = rendering_loss(y.clone(), y)
    assert 0 < float(loss) < 1e-6
    loss, _ = rendering_loss(1 - y, y)
    assert math.isfinite(float(loss))
    assert float(loss) == pytest.approx(-4 * math.log(1e-7), rel=1e-6)


def test_nan_prediction_raises():
    with pytest.raises(FloatingPointError):
        rendering_loss(torch.tensor([[math.nan, 0.5]]), torch.tensor([[1.0, 0.0]]))
