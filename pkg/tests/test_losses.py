import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, max_relative_error
from pipofan.exceptions import ConfigurationError, ContractError
from pipofan.losses import (
    LossConfig,
    SINGLE_ORGAN_WEIGHTS,
    dps_loss,
    full_cross_entropy,
    softmax_probs,
    tal_dps_loss,
    tal_loss,
    tal_loss_logits,
    weighted_cross_entropy,
)

D = torch.float64


def _logits(*values):
    return torch.tensor(values, dtype=D).view(1, -1, 1, 1)


def test_softmax_examples():
    assert torch.allclose(softmax_probs(_logits(0, 0, 0, 0)).flatten(), torch.full((4,), 0.25, dtype=D))
    assert torch.allclose(softmax_probs(_logits(math.log(3), 0)).flatten(), torch.tensor([0.75, 0.25], dtype=D))
    z = torch.randn(2, 4, 3, 3, dtype=D)
    assert torch.allclose(softmax_probs(z + 1000), softmax_probs(z), atol=1e-12)
    assert np.allclose(softmax_probs(z.numpy()), softmax_probs(z).numpy())


def test_dps_examples():
    perfect = _logits(0, 200, 0, 0)
    assert dps_loss([perfect], [torch.tensor([[[1]]])]).item() == pytest.approx(0, abs=1e-12)
    half = _logits(0, 0)
    assert dps_loss([half], [torch.tensor([[[1]]])]).item() == pytest.approx(math.log(2), abs=1e-12)
    z = torch.randn(1, 4, 4, 4, dtype=D)
    y = torch.randint(0, 4, (1, 4, 4))
    single = dps_loss([z], [y])
    assert dps_loss([z, z], [y, y]).item() == pytest.approx(single.item(), abs=1e-12)


def test_dps_weights_and_errors():
    z = _logits(0, 0)
    y = torch.tensor([[[1]]])
    w = SINGLE_ORGAN_WEIGHTS
    assert dps_loss([z], [y], LossConfig(class_weights=w)).item() == pytest.approx(1.2 * math.log(2))
    with pytest.raises(ContractError):
        dps_loss([z], [y, y])
    with pytest.raises(ContractError):
        weighted_cross_entropy(torch.zeros(1, 4, 2, 2, dtype=D), torch.zeros(1, 3, 3, dtype=torch.long))
    with pytest.raises(ConfigurationError):
        LossConfig(class_weights=(1.0, 0.0))
    with pytest.raises(ConfigurationError):
        LossConfig(tal_scales="some")


def test_dps_nonnegative():
    for _ in range(10):
        z = torch.randn(2, 4, 4, 4, dtype=D) * 5
        y = torch.randint(0, 4, (2, 4, 4))
        assert dps_loss([z], [y]).item() >= 0


def test_tal_examples():
    p_liver = torch.tensor([0.1, 0.8, 0.05, 0.05], dtype=D).view(1, 4, 1, 1)
    assert tal_loss(p_liver, torch.tensor([[[1]]]), {1}).item() == pytest.approx(0.2231435513, abs=1e-9)
    p_bg = torch.tensor([0.4, 0.3, 0.2, 0.1], dtype=D).view(1, 4, 1, 1)
    assert tal_loss(p_bg, torch.tensor([[[0]]]), {1}).item() == pytest.approx(0.3566749439, abs=1e-9)
    # logit path agrees
    z = torch.log(p_bg)
    assert tal_loss_logits(z, torch.tensor([[[0]]]), {1}).item() == pytest.approx(0.3566749439, abs=1e-9)


def test_tal_rejects_labels_outside_set():
    p = torch.full((1, 4, 2, 2), 0.25, dtype=D)
    with pytest.raises(ContractError):
        tal_loss(p, torch.tensor([[[0, 2], [0, 1]]]), {1})
    with pytest.raises(ContractError):
        tal_loss(p, torch.zeros(1, 2, 2, dtype=torch.long), set())


def _random_case(gen, n=1, size=8, classes=4):
    z = torch.randn(n, classes, size, size, dtype=D, generator=gen) * 2
    y = torch.randint(0, classes, (n, size, size), generator=gen)
    return z, y


def test_tal_reduces_to_full_cross_entropy():
    gen = torch.Generator().manual_seed(7)
    z = torch.randn(100, 4, dtype=D, generator=gen).view(100, 4, 1, 1)
    y = torch.randint(0, 4, (100, 1, 1), generator=gen)
    p = softmax_probs(z)
    full = full_cross_entropy(p, y)
    assert abs(tal_loss(p, y, {1, 2, 3}).item() - full.item()) < 1e-9
    assert abs(tal_loss_logits(z, y, {1, 2, 3}).item() - full.item()) < 1e-9


def test_tal_dps_reductions():
    gen = torch.Generator().manual_seed(3)
    z1, y1 = _random_case(gen)
    z2, y2 = _random_case(gen, size=4)
    full = tal_dps_loss([z1, z2], [y1, y2], {1, 2, 3})
    assert abs(full.item() - dps_loss([z1, z2], [y1, y2]).item()) < 1e-9
    partial_y = torch.where(y1 == 1, y1, torch.zeros_like(y1))
    one = tal_dps_loss([z1], [partial_y], {1})
    assert one.item() == pytest.approx(tal_loss_logits(z1, partial_y, {1}).item(), abs=1e-12)
    same = tal_dps_loss([z1, z1], [partial_y, partial_y], {1})
    assert same.item() == pytest.approx(one.item(), abs=1e-12)
    only_full = tal_dps_loss([z1, z2], [partial_y, torch.zeros_like(y2)], {1}, LossConfig(tal_scales="full"))
    assert only_full.item() == pytest.approx(one.item(), abs=1e-12)


def _partial(y, labeled):
    keep = torch.zeros_like(y, dtype=torch.bool)
    for c in labeled:
        keep |= y == c
    return torch.where(keep, y, torch.zeros_like(y))


def _grad_check(loss_fn, z):
    z = z.clone().requires_grad_(True)
    loss_fn(z).backward()
    numeric = central_difference(loss_fn, z.detach(), h=1e-3)
    return max_relative_error(z.grad, numeric)


@pytest.mark.parametrize("which", ["dps", "tal", "tal_logits", "tal_dps"])
def test_gradients_match_finite_differences(which):
    gen = torch.Generator().manual_seed(11)
    for _ in range(5):
        z, y = _random_case(gen)
        yp = _partial(y, {2})
        fns = {
            "dps": lambda t: dps_loss([t], [y], weights=(0.5, 1.0, 1.5, 2.0)),
            "tal": lambda t: tal_loss(softmax_probs(t), yp, {2}),
            "tal_logits": lambda t: tal_loss_logits(t, yp, {2}),
            "tal_dps": lambda t: tal_dps_loss([t, t[..., ::2, ::2]], [yp, yp[..., ::2, ::2]], {2}),
        }
        assert _grad_check(fns[which], z) < 1e-4


def test_tal_merged_gradient_identical_at_unknown_voxels():
    gen = torch.Generator().manual_seed(5)
    p = softmax_probs(torch.randn(1, 4, 4, 4, dtype=D, generator=gen)).requires_grad_(True)
    y = torch.zeros(1, 4, 4, dtype=torch.long)
    y[0, 0, 0] = 1
    tal_loss(p, y, {1}).backward()
    g = p.grad[0]
    unknown = y[0] == 0
    merged = g[[0, 2, 3]][:, unknown]
    assert torch.equal(merged[0], merged[1]) and torch.equal(merged[0], merged[2])
    assert torch.all(g[1][unknown] == 0)


def test_tal_logit_gradient_of_merged_classes_scales_with_probability():
    gen = torch.Generator().manual_seed(6)
    z = torch.randn(1, 4, 3, 3, dtype=D, generator=gen).requires_grad_(True)
    y = torch.zeros(1, 3, 3, dtype=torch.long)
    tal_loss_logits(z, y, {1}).backward()
    p = softmax_probs(z.detach())
    ratio = z.grad / p  # p_j (1 - 1/q) / p_j is the same for every merged class
    assert torch.allclose(ratio[:, 0], ratio[:, 2], rtol=0, atol=1e-12)
    assert torch.allclose(ratio[:, 0], ratio[:, 3], rtol=0, atol=1e-12)


def test_tal_clamp_keeps_loss_finite():
    z = _logits(-1000, 1000, -1000, -1000)
    y = torch.tensor([[[0]]])
    assert torch.isfinite(tal_loss(softmax_probs(z), y, {1}))
    zz = z.clone().requires_grad_(True)
    loss = tal_loss_logits(zz, y, {1})
    loss.backward()
    assert loss.item() == pytest.approx(-math.log(1e-12))
    assert torch.isfinite(zz.grad).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([{1}, {2}, {1, 3}, {1, 2, 3}]))
def test_tal_nonnegative(seed, labeled):
    gen = torch.Generator().manual_seed(seed)
    z, y = _random_case(gen, size=4)
    yp = _partial(y, labeled)
    assert tal_loss(softmax_probs(z * 3), yp, labeled).item() >= 0
    assert tal_loss_logits(z * 3, yp, labeled).item() >= 0


def test_tal_zero_at_perfect_prediction():
    y = torch.tensor([[[1, 0], [0, 1]]])
    p = torch.zeros(1, 4, 2, 2, dtype=D)
    p[0, 1] = (y[0] == 1).to(D)
    p[0, 2] = (y[0] == 0).to(D)  # unknown voxels go to an unlabeled organ, still correct
    assert tal_loss(p, y, {1}).item() == pytest.approx(0, abs=1e-12)
