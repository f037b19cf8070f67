import math

import pytest
import torch
import torch.nn.functional as F

from oracles import central_difference, max_relative_error
from pipofan.exceptions import ContractError
from pipofan.fusion import AdaptiveFusion, fuse, scale_score
from pipofan.losses import tal_loss_logits

D = torch.float64


def _identity_fusion(n_classes=1):
    """Shared conv that copies channel 0 through unchanged."""
    fusion = AdaptiveFusion(n_classes).double().zero_()
    with torch.no_grad():
        fusion.shared_conv.weight[0, 0, 1, 1] = 1.0
    return fusion


def test_constant_map_scores_twice_its_value():
    fusion = _identity_fusion()
    assert scale_score(torch.full((1, 1, 4, 4), 1.5, dtype=D), fusion).item() == pytest.approx(3.0)


def test_hand_computed_score():
    fusion = _identity_fusion()
    f = torch.tensor([[[[0.0, 4.0], [0.0, 0.0]]]], dtype=D)
    assert scale_score(f, fusion).item() == pytest.approx(5.0)


def test_zero_conv_scores_zero():
    fusion = AdaptiveFusion(4).double().zero_()
    assert torch.equal(scale_score(torch.randn(3, 4, 8, 8, dtype=D), fusion), torch.zeros(3, dtype=D))


def test_equal_scores_give_uniform_weights():
    fusion = AdaptiveFusion(4).double().zero_()
    pyr = [torch.randn(2, 4, 32 // 2**s, 32 // 2**s, dtype=D) for s in range(5)]
    out = fuse(pyr, fusion)
    assert torch.allclose(out.fusion_weights, torch.full((2, 5), 0.2, dtype=D))


def test_single_scale_passes_through():
    fusion = AdaptiveFusion(4, seed=1).double()
    f = torch.randn(1, 4, 8, 8, dtype=D)
    out = fuse([f], fusion)
    assert out.fusion_weights.tolist() == [[1.0]]
    assert torch.equal(out.fused_logits, f)


def test_hand_softmax_weights():
    fusion = _identity_fusion()
    # constant maps give S = 2v, so v = ln2 / 2 and 0 yield scores (ln 2, 0)
    f1 = torch.full((1, 1, 4, 4), math.log(2) / 2, dtype=D)
    f2 = torch.zeros(1, 1, 2, 2, dtype=D)
    w = fuse([f1, f2], fusion).fusion_weights[0]
    assert torch.allclose(w, torch.tensor([2 / 3, 1 / 3], dtype=D), atol=1e-12)


def test_empty_pyramid():
    with pytest.raises(ContractError):
        fuse([], AdaptiveFusion(4))


def test_simplex_outputs():
    fusion = AdaptiveFusion(4, seed=3)
    pyr = [torch.randn(2, 4, 16 // 2**s, 16 // 2**s) * 3 for s in range(4)]
    out = fuse(pyr, fusion)
    assert out.fused_probs.shape == (2, 4, 16, 16)
    assert torch.all(out.fusion_weights > 0)
    assert torch.allclose(out.fusion_weights.sum(1), torch.ones(2, dtype=D), atol=1e-6)
    assert out.fused_logits.dtype == torch.float32
    assert torch.allclose(out.fused_probs.sum(1), torch.ones(2, 16, 16), atol=1e-6)
    out.check_invariants()


def test_permuting_scales_permutes_weights():
    fusion = AdaptiveFusion(4, seed=4).double()
    pyr = [torch.randn(1, 4, 8 // 2**s, 8 // 2**s, dtype=D) for s in range(3)]
    base = fuse(pyr, fusion, target_size=(8, 8))
    perm = [2, 0, 1]
    permuted = fuse([pyr[i] for i in perm], fusion, target_size=(8, 8))
    assert torch.allclose(permuted.fusion_weights, base.fusion_weights[:, perm], atol=1e-12)
    assert torch.allclose(permuted.fused_logits, base.fused_logits, atol=1e-12)


def test_uniform_score_shift_leaves_weights_unchanged():
    fusion = AdaptiveFusion(4, seed=5).double()
    pyr = [torch.randn(1, 4, 8 // 2**s, 8 // 2**s, dtype=D) for s in range(3)]
    w = fuse(pyr, fusion).fusion_weights
    with torch.no_grad():
        fusion.shared_conv.bias += 7.0
    assert torch.allclose(fuse(pyr, fusion).fusion_weights, w, atol=1e-12)


def test_weights_stay_positive_for_large_score_gaps():
    fusion = _identity_fusion().float()
    pyr = [torch.full((1, 1, 4, 4), 150.0), torch.zeros(1, 1, 2, 2)]
    w = fuse(pyr, fusion).fusion_weights.detach()
    assert torch.all(w > 0) and float(w[0, 1]) == pytest.approx(math.exp(-300), rel=1e-6)


def test_upsampling_is_bilinear():
    fusion = AdaptiveFusion(2).zero_()
    coarse = torch.randn(1, 2, 4, 4)
    out = fuse([torch.zeros(1, 2, 8, 8), coarse], fusion)
    up = F.interpolate(coarse, size=(8, 8), mode="bilinear", align_corners=False)
    assert torch.allclose(out.fused_logits, 0.5 * up)


def test_shared_conv_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(9)
    fusion = AdaptiveFusion(4, seed=2).double()
    pyr = [torch.randn(1, 4, 8 // 2**s, 8 // 2**s, dtype=D, generator=gen) for s in range(3)]
    labels = torch.randint(0, 2, (1, 8, 8), generator=gen)

    def loss_for(weight):
        saved = fusion.shared_conv.weight.data.clone()
        fusion.shared_conv.weight.data.copy_(weight)
        try:
            return tal_loss_logits(fuse(pyr, fusion).fused_logits, labels, {1})
        finally:
            fusion.shared_conv.weight.data.copy_(saved)

    fusion.zero_grad()
    tal_loss_logits(fuse(pyr, fusion).fused_logits, labels, {1}).backward()
    numeric = central_difference(loss_for, fusion.shared_conv.weight.detach(), h=1e-3)
    assert max_relative_error(fusion.shared_conv.weight.grad, numeric) < 1e-4
