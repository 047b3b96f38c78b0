import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from clrkit.localize import (COMPARED_LAYERS, FeatureStack, Localizer, LocalizerOutput,
                             Preprocessor, corners_from_params, decide_cropped, localize,
                             preprocess)
from clrkit.metrics import RectMask
from helpers import randomize_subnets


def test_preprocess_shape_and_initial_identity():
    p = Preprocessor(channels=(8, 8, 8, 8, 8))
    x = torch.rand(2, 3, 20, 28)
    y, feats = preprocess(p, x)
    assert y.shape == x.shape and torch.equal(y, x)
    assert len(feats.features) == 6 and len(feats.compared()) == 3


def test_preprocess_twin_calls_are_bit_identical():
    p = Preprocessor(channels=(8, 8, 8, 8, 8))
    randomize_subnets(p, std=0.05)
    x = torch.rand(1, 3, 16, 16)
    (a, fa), (b, fb) = p(x), p(x)
    assert torch.equal(a, b)
    assert all(torch.equal(u, v) for u, v in zip(fa.features, fb.features))
    # batching two views together reads the same parameters as separate calls
    both, _ = p(torch.cat([x, x]))
    assert torch.allclose(both[0], a[0], atol=1e-6) and torch.allclose(both[1], a[0], atol=1e-6)


def test_feature_stack_indices():
    feats = [torch.full((1,), float(i)) for i in range(1, 7)]
    stack = FeatureStack(feats)
    assert stack.layers_compared == COMPARED_LAYERS == (3, 4, 5)
    assert [float(f) for f in stack.compared()] == [3.0, 4.0, 5.0]
    with pytest.raises(IndexError):
        FeatureStack(feats[:4])


def _valid(out: LocalizerOutput):
    c, s = out.corners, out.score
    assert bool(((c > 0) & (c < 1)).all() and ((s > 0) & (s < 1)).all())
    assert bool((c[:, 0] < c[:, 2]).all() and (c[:, 1] < c[:, 3]).all())


def test_localizer_outputs_in_range_and_ordered():
    loc = Localizer(widths=(4, 8, 8), pool=4, hidden=(16, 16, 16))
    out = localize(loc, torch.rand(3, 3, 32, 32))
    assert out.corners.shape == (3, 4) and out.score.shape == (3,)
    _valid(out)
    for r in out.rects():
        assert isinstance(r, RectMask)


def test_localizer_resolution_tolerant():
    loc = Localizer(widths=(4, 8, 8), pool=4, hidden=(16, 16, 16))
    _valid(loc(torch.rand(1, 3, 48, 64)))


@given(st.floats(-1e4, 1e4, allow_nan=False), st.integers(0, 1000))
def test_corners_valid_for_extreme_logits(scale, seed):
    z = torch.randn(8, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    c = corners_from_params(z)
    assert bool(((c > 0) & (c < 1)).all())
    assert bool((c[:, 0] < c[:, 2]).all() and (c[:, 1] < c[:, 3]).all())


def test_localizer_extreme_activations():
    loc = Localizer(widths=(4, 8, 8), pool=4, hidden=(16, 16, 16))
    with torch.no_grad():
        for p in loc.mlp.parameters():
            p.mul_(1e4)
    for x in (torch.zeros(2, 3, 16, 16), torch.ones(2, 3, 16, 16), torch.rand(2, 3, 16, 16) * 1e3):
        _valid(loc(x))


@pytest.mark.parametrize("score,expected", [(0.5, True), (0.49, False), (1.0, True), (0.0, False)])
def test_decide_cropped_threshold(score, expected):
    assert decide_cropped(score) is expected
    assert decide_cropped(RectMask(0, 0, 1, 1, score)) is expected


def test_decide_cropped_batched():
    out = LocalizerOutput(torch.tensor([[0.1, 0.1, 0.9, 0.9]] * 3), torch.tensor([0.2, 0.5, 0.9]))
    assert decide_cropped(out).tolist() == [False, True, True]
