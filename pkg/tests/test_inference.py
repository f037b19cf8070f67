import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_components
from pipofan.datamodel import ClassMap
from pipofan.exceptions import ConfigurationError, ContractError
from pipofan.fusion import AdaptiveFusion
from pipofan.inference import (
    PostprocessRules,
    count_components,
    ensemble_soft,
    ensemble_vote,
    postprocess_components,
    predict_slices,
    segment_volume,
)
from pipofan.network import PipoFanNet

CM = ClassMap()
RULES = PostprocessRules.for_class_map(CM)


def _blob(vol, corner, n, value):
    """Place ``n`` voxels in a line starting at ``corner`` along the last axis."""
    z, y, x = corner
    vol[z, y, x:x + n] = value


def test_default_budgets():
    assert RULES.budgets == {1: 1, 2: 2, 3: 1}
    assert PostprocessRules.for_class_map(CM, {"kidney": 3}).budgets[2] == 3
    with pytest.raises(ConfigurationError):
        PostprocessRules.for_class_map(CM, {"pancreas": 1})
    with pytest.raises(ConfigurationError):
        PostprocessRules({0: 1})


def test_liver_keeps_largest_blob():
    vol = np.zeros((3, 12, 12), np.uint8)
    _blob(vol, (0, 0, 0), 10, 1)
    _blob(vol, (2, 8, 0), 3, 1)
    out = postprocess_components(vol, RULES)
    assert out.sum() == 10 and count_components(out, 1) == 1
    assert out[0, 0, :10].all()


def test_kidney_keeps_two_largest_blobs():
    vol = np.zeros((5, 12, 12), np.uint8)
    _blob(vol, (0, 0, 0), 9, 2)
    _blob(vol, (2, 0, 0), 7, 2)
    _blob(vol, (4, 0, 0), 2, 2)
    out = postprocess_components(vol, RULES)
    assert (out == 2).sum() == 16 and count_components(out, 2) == 2
    assert not out[4].any()


def test_single_blob_per_class_unchanged():
    vol = np.zeros((4, 10, 10), np.uint8)
    _blob(vol, (0, 0, 0), 5, 1)
    _blob(vol, (2, 2, 0), 4, 2)
    _blob(vol, (3, 5, 0), 6, 3)
    assert np.array_equal(postprocess_components(vol, RULES), vol)


def test_diagonal_voxels_are_one_component():
    vol = np.zeros((3, 3, 3), np.uint8)
    vol[0, 0, 0] = vol[1, 1, 1] = vol[2, 2, 2] = 1
    assert count_components(vol, 1) == 1


def test_multi_class_budgets_together():
    vol = np.zeros((6, 16, 16), np.uint8)
    for i, size in enumerate([8, 5, 3]):
        _blob(vol, (0, 3 * i, 0), size, 1)
        _blob(vol, (3, 3 * i, 0), size, 2)
        _blob(vol, (5, 3 * i, 0), size, 3)
    out = postprocess_components(vol, RULES)
    assert [count_components(out, c) for c in (1, 2, 3)] == [1, 2, 1]
    assert [(out == c).sum() for c in (1, 2, 3)] == [8, 13, 8]


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (5, 6, 6), elements=st.sampled_from([0, 0, 0, 1, 2])))
def test_postprocess_matches_flood_fill_oracle(vol):
    out = postprocess_components(vol, RULES)
    for cls, budget in ((1, 1), (2, 2)):
        comps = sorted(brute_components(vol == cls), key=len, reverse=True)
        kept_sizes = sorted((len(c) for c in comps), reverse=True)[:budget]
        assert (out == cls).sum() == sum(kept_sizes)
        assert count_components(out, cls) == min(len(comps), budget)
    # never adds foreground, never changes a kept voxel's class
    assert np.all((out == 0) | (out == vol))


@pytest.mark.parametrize("votes,expected", [((1, 1, 0, 0, 1), 1), ((1, 2), 1), ((2, 0, 2, 0), 0)])
def test_majority_vote(votes, expected):
    preds = [np.full((2, 2), v, np.uint8) for v in votes]
    out = ensemble_vote(preds, n_classes=4)
    assert (out == expected).all() and out.dtype == np.uint8


def test_vote_single_model_identity(rng):
    pred = rng.integers(0, 4, (3, 5, 5)).astype(np.uint8)
    assert np.array_equal(ensemble_vote([pred]), pred)


def test_vote_errors():
    with pytest.raises(ContractError):
        ensemble_vote([])
    with pytest.raises(ContractError):
        ensemble_vote([np.zeros((2, 2)), np.zeros((3, 3))])


def test_soft_ensemble_averages():
    a = np.array([[0.6, 0.4]]).reshape(1, 2, 1)
    b = np.array([[0.1, 0.9]]).reshape(1, 2, 1)
    assert ensemble_soft([a, b]).item() == 1


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return PipoFanNet(tiny_config, seed=0), AdaptiveFusion(tiny_config.n_classes, seed=0)


def test_segment_volume_shape(tiny_model, rng):
    net, fusion = tiny_model
    image = rng.normal(size=(5, 16, 16)).astype(np.float32)
    assert segment_volume(net, fusion, image).shape == (5, 16, 16)
    assert segment_volume(net, fusion, image, native_size=(40, 40)).shape == (5, 40, 40)


def test_zeroed_model_predicts_background(tiny_model, rng):
    net, fusion = tiny_model
    net.zero_heads()
    fusion.zero_()
    image = rng.normal(size=(4, 16, 16)).astype(np.float32)
    probs, _ = predict_slices(net, fusion, image)
    assert np.allclose(probs, 0.25)
    assert not segment_volume(net, fusion, image).any()


def test_identical_slices_identical_labels(tiny_model, rng):
    net, fusion = tiny_model
    sl = rng.normal(size=(16, 16)).astype(np.float32)
    image = np.stack([sl] * 3)
    labels = segment_volume(net, fusion, image)
    assert np.array_equal(labels[0], labels[1]) and np.array_equal(labels[1], labels[2])


def test_padding_policy(tiny_model, rng):
    net, fusion = tiny_model
    image = rng.normal(size=(2, 14, 18)).astype(np.float32)
    labels, meta = segment_volume(net, fusion, image, return_meta=True)
    assert labels.shape == (2, 14, 18)
    assert meta["pad"] == [[1, 1], [1, 1]]
    with pytest.raises(ConfigurationError):
        segment_volume(net, fusion, image, pad_policy="strict")


def test_inference_is_deterministic(tiny_model, rng):
    net, fusion = tiny_model
    image = rng.normal(size=(3, 16, 16)).astype(np.float32)
    a, _ = predict_slices(net, fusion, image, batch_size=1)
    b, _ = predict_slices(net, fusion, image, batch_size=3)
    assert np.allclose(a, b, atol=1e-6)
    assert np.allclose(a.sum(axis=1), 1, atol=1e-6)
