"""
Tests for the channel filter network, Gumbel sampling and prototype disentanglement
"""
import pytest
import torch

from src.config import SadConfig
from src.errors import NonFiniteError, ShapeError
from src.models.sad import FilterNet, disentangle, max_of_gumbel_softmax, sample_gumbel, top_m_filter
from src.utils import torch_generator
from tests.helpers import assert_gradients_match


def test_single_draw_is_one_hot():
    logits = torch.randn(4, 10)
    mask = max_of_gumbel_softmax(logits, samples=1, hard=True, generator=torch_generator(0))
    assert torch.equal(mask.sum(dim=-1), torch.ones(4))
    assert set(mask.unique().tolist()) <= {0.0, 1.0}
    prototype = torch.randn(4, 10)
    assert torch.equal(torch.count_nonzero(disentangle(prototype, mask).relevant, dim=-1), torch.ones(4, dtype=torch.long))


@pytest.mark.parametrize("hard", [True, False])
def test_filter_values_in_unit_interval(hard):
    mask = max_of_gumbel_softmax(torch.randn(6, 12) * 3, samples=5, hard=hard, generator=torch_generator(1))
    assert mask.min() >= 0.0 and mask.max() <= 1.0


def test_hard_popcount_bounds():
    mask = max_of_gumbel_softmax(torch.randn(500, 16), samples=6, hard=True, generator=torch_generator(2))
    counts = mask.sum(dim=-1)
    assert counts.min() >= 1 and counts.max() <= 6


def test_uniform_logit_occupancy_matches_closed_form():
    channels, samples, draws = 16, 8, 20_000
    mask = max_of_gumbel_softmax(torch.zeros(draws, channels), samples, hard=True, generator=torch_generator(3))
    expected = channels * (1 - (1 - 1 / channels) ** samples)
    assert abs(mask.sum(dim=-1).mean().item() - expected) <= 0.02 * expected


def test_hard_mode_passes_relaxed_gradient():
    logits = torch.randn(3, 8, requires_grad=True)
    noise = sample_gumbel((3, 4, 8), generator=torch_generator(4))
    hard = max_of_gumbel_softmax(logits, 4, hard=True, noise=noise)
    soft = max_of_gumbel_softmax(logits, 4, hard=False, noise=noise)
    weights = torch.randn(3, 8)
    (hard_grad,) = torch.autograd.grad((hard * weights).sum(), logits)
    (soft_grad,) = torch.autograd.grad((soft * weights).sum(), logits)
    assert torch.allclose(hard_grad, soft_grad)


def test_noise_shape_and_finiteness_checks():
    with pytest.raises(ShapeError):
        max_of_gumbel_softmax(torch.zeros(2, 4), 3, noise=torch.zeros(2, 4))
    with pytest.raises(NonFiniteError):
        max_of_gumbel_softmax(torch.tensor([[0.0, float("nan")]]), 1)


def test_top_m_selects_all_channels_when_m_is_large():
    logits = torch.randn(2, 5)
    mask = top_m_filter(logits, 7)
    assert torch.equal(mask, torch.ones(2, 5))
    prototype = torch.randn(2, 5)
    split = disentangle(prototype, mask)
    assert torch.equal(split.relevant, prototype)
    assert torch.count_nonzero(split.irrelevant) == 0


def test_top_m_of_decreasing_logits():
    logits = torch.arange(10, 0, -1, dtype=torch.float32)
    assert top_m_filter(logits, 3).nonzero().flatten().tolist() == [0, 1, 2]


def test_top_m_tie_goes_to_lower_index():
    logits = torch.zeros(12)
    logits[2] = 5.0
    logits[5] = 3.0
    logits[9] = 3.0
    assert top_m_filter(logits, 2).nonzero().flatten().tolist() == [2, 5]


def test_disentangle_hand_example():
    prototype = torch.tensor([2.0, -3.0, 0.0, 1.0])
    relevant, irrelevant = disentangle(prototype, torch.tensor([1.0, 0.0, 1.0, 0.0]))
    assert relevant.tolist() == [2.0, 0.0, 0.0, 0.0]
    assert irrelevant.tolist() == [0.0, -3.0, 0.0, 1.0]


def test_reconstruction_for_any_filter():
    prototype = torch.randn(5, 9, dtype=torch.float64)
    for mask in (torch.rand(5, 9, dtype=torch.float64), top_m_filter(torch.randn(5, 9, dtype=torch.float64), 4)):
        relevant, irrelevant = disentangle(prototype, mask)
        assert torch.allclose(relevant + irrelevant, prototype, atol=1e-6)
    with pytest.raises(ShapeError):
        disentangle(prototype, torch.ones(5, 8, dtype=torch.float64))


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_filter_net_depth(depth):
    net = FilterNet(SadConfig(depth=depth), dim=8, samples=3)
    linears = [m for m in net.mlp if isinstance(m, torch.nn.Linear)]
    assert len(linears) == depth
    assert net(torch.randn(4, 8)).shape == (4, 8)
    assert torch.equal(net.eval_filter(torch.randn(4, 8)).sum(dim=-1), torch.full((4,), 3.0))


def test_soft_filter_gradient_with_fixed_noise():
    net = FilterNet(SadConfig(train_mode="soft"), dim=6, samples=3).double()
    prototypes = torch.randn(2, 6, dtype=torch.float64)
    noise = sample_gumbel((2, 3, 6), generator=torch_generator(5), dtype=torch.float64)
    weights = torch.randn(2, 6, dtype=torch.float64)

    def objective():
        return (disentangle(prototypes, net.sample_filter(prototypes, noise=noise)).relevant * weights).sum()

    assert_gradients_match(objective, dict(net.named_parameters()))
