import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaseg import diffcore as dc
from metaseg.boxes import Box
from metaseg.diffcore import Tensor
from metaseg.errors import BoxError, SizeError
from metaseg.losses import (PROB_EPS, SegPrediction, SegTarget, bce, box_loss, jaccard_extension_bruteforce,
                            jaccard_extension_oracle, lovasz_grad, lovasz_softmax, lovasz_value, lovasz_values,
                            mask_loss, seg_loss)
from oracles import all_binary_patterns, jaccard_set_loss, lovasz_oracle, threshold_integral


# ---------------------------------------------------------------- lovasz_grad

@pytest.mark.parametrize("gt,weights", [([1], [1.0]), ([1, 0], [1.0, 0.0]), ([0, 1], [0.5, 0.5])])
def test_lovasz_grad_examples(gt, weights):
    np.testing.assert_allclose(lovasz_grad(gt), weights, atol=1e-15)


def test_lovasz_grad_empty():
    assert lovasz_grad([]).size == 0


def test_lovasz_grad_telescopes_exhaustively():
    for gt in all_binary_patterns(12):
        if not gt.any():
            continue
        w = lovasz_grad(gt)
        assert np.all(w >= -1e-15)
        # prefix sums are the Jaccard losses of the growing mispredicted sets
        target = gt.astype(bool)
        expect = [jaccard_set_loss(target, np.arange(gt.size) <= k) for k in range(gt.size)]
        np.testing.assert_allclose(np.cumsum(w), expect, atol=1e-12)


# ---------------------------------------------------------------- lovasz_softmax

def _probs(p_fg):
    p_fg = np.asarray(p_fg, dtype=np.float64)
    return np.stack([1.0 - p_fg, p_fg])


def test_lovasz_perfect_prediction_is_zero():
    gt = np.array([[1, 0], [0, 1]])
    assert lovasz_value(_probs(gt.astype(float)), gt) == 0.0


def test_lovasz_two_pixel_example():
    gt = np.array([1, 0])
    assert lovasz_value(_probs([0.6, 0.4]), gt) == pytest.approx(0.4, abs=1e-12)
    assert lovasz_oracle([0.6, 0.4], gt)[0] == pytest.approx(0.4, abs=2e-4)


def test_lovasz_random_3x3_matches_oracle():
    rng = np.random.default_rng(7)
    gt = rng.uniform(size=(3, 3)) < 0.5
    p = rng.uniform(size=(3, 3))
    assert abs(lovasz_value(_probs(p), gt) - lovasz_oracle(p.ravel(), gt.ravel())[0]) < 1e-3


def test_lovasz_matches_oracle_small_exhaustive():
    rng = np.random.default_rng(0)
    for gt in all_binary_patterns(6):
        p = rng.uniform(size=(20, gt.size))
        lib = lovasz_values(np.stack([1 - p, p], axis=1), np.broadcast_to(gt, p.shape))
        np.testing.assert_allclose(lib, lovasz_oracle(p, gt), atol=2e-4)


def test_lovasz_batch_is_mean_of_images():
    rng = np.random.default_rng(2)
    p = rng.uniform(size=(4, 5, 5))
    gt = rng.uniform(size=(4, 5, 5)) < 0.4
    probs = np.stack([1 - p, p], axis=1)
    batch = float(lovasz_softmax(Tensor(probs), gt).value.data)
    singles = [lovasz_value(probs[i], gt[i]) for i in range(4)]
    assert batch == pytest.approx(np.mean(singles), abs=1e-14)


def test_lovasz_shape_mismatch():
    with pytest.raises(SizeError):
        lovasz_softmax(Tensor(np.full((2, 3, 3), 0.5)), np.zeros((3, 4)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_lovasz_gradient_checks(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(size=(2, 4, 4)) < 0.5
    logits = rng.normal(size=(2, 2, 4, 4))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    err = np.abs(np.stack([~gt, gt], axis=1) - p).reshape(2, 2, -1)
    gaps = np.diff(np.sort(err, axis=2), axis=2)
    if gaps.min() < 1e-6:      # sort permutation not locally constant
        return
    worst = dc.grad_check(lambda x: lovasz_softmax(dc.softmax(x, axis=1), gt).value, [logits], eps=1e-7)
    assert worst < 1e-4


# ---------------------------------------------------------------- Jaccard extension oracle

def test_oracle_all_zero_errors():
    assert jaccard_extension_oracle(np.zeros(5), np.array([1, 0, 1, 0, 0]), 1) == 0.0


def test_oracle_two_pixel_case():
    # fg term of the two-pixel example: both errors 0.4
    assert jaccard_extension_oracle([0.4, 0.4], [1, 0], 1) == pytest.approx(0.4, abs=2e-4)
    assert jaccard_extension_oracle([0.4, 0.4], [1, 0], 0) == pytest.approx(0.4, abs=2e-4)


def test_library_oracle_agrees_with_pointwise_grid():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n = int(rng.integers(1, 9))
        e, gt = rng.uniform(size=n), (rng.uniform(size=n) < 0.5).astype(int)
        for c in (0, 1):
            a = jaccard_extension_oracle(e, gt, c)
            assert a == pytest.approx(jaccard_extension_bruteforce(e, gt, c), abs=1e-12)
            assert a == pytest.approx(threshold_integral(e[None], gt == c)[0], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), idx=st.integers(0, 7), bump=st.floats(0.0, 1.0))
def test_oracle_monotone_in_errors(seed, idx, bump):
    rng = np.random.default_rng(seed)
    e = rng.uniform(size=8)
    gt = (rng.uniform(size=8) < 0.5).astype(int)
    raised = e.copy()
    raised[idx] = min(1.0, e[idx] + bump)
    for c in (0, 1):
        assert jaccard_extension_oracle(raised, gt, c) >= jaccard_extension_oracle(e, gt, c) - 1e-12


# ---------------------------------------------------------------- bce

def test_bce_cases():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    perfect = float(bce(Tensor(y), y).value.data)
    assert 0 < perfect < 1e-6
    assert perfect == pytest.approx(-math.log(1 - PROB_EPS), rel=1e-6)
    assert float(bce(Tensor(np.full((3, 3), 0.5)), np.eye(3)).value.data) == pytest.approx(math.log(2), abs=1e-15)


def test_bce_matches_direct_sum():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.01, 0.99, size=(4, 6))
    y = (rng.uniform(size=(4, 6)) < 0.5).astype(float)
    total = 0.0
    for pi, yi in zip(p.ravel(), y.ravel()):
        total -= yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
    assert float(bce(Tensor(p), y).value.data) == pytest.approx(total / p.size, abs=1e-12)


# ---------------------------------------------------------------- box_loss

def test_box_loss_huber_branches():
    gt = np.array([0.5, 0.5, 0.1, 0.2])
    assert float(box_loss(Tensor(gt.copy()), gt).value.data) == 0.0
    assert float(box_loss(Tensor(gt + 0.5), gt).value.data) == pytest.approx(0.5, abs=1e-15)
    assert float(box_loss(Tensor(gt - 2.0), gt).value.data) == pytest.approx(6.0, abs=1e-15)


def test_box_loss_with_boxes():
    b = Box(30, 40, 20, 10)
    assert float(box_loss(b, b, frame_size=(96, 96)).value.data) == 0.0
    with pytest.raises(BoxError):
        box_loss(b, Box(30, 40, 0.5, 10), frame_size=(96, 96))


# ---------------------------------------------------------------- seg_loss

def test_seg_loss_components():
    rng = np.random.default_rng(9)
    gt = rng.uniform(size=(2, 6, 6)) < 0.5
    p = rng.uniform(size=(2, 6, 6))
    probs = Tensor(np.stack([1 - p, p], axis=1))
    gbox = rng.normal(size=(3, 4)) * 0.3
    pbox = Tensor(gbox + rng.normal(size=(3, 4)))
    total = seg_loss(SegPrediction(probs, pbox), SegTarget(gt, gbox))
    lm = float(mask_loss(probs, gt).value.data)
    lb = float(box_loss(pbox, gbox).value.data)
    assert float(total.value.data) == pytest.approx(lm + lb, abs=1e-12)
    assert total.components == {"box": pytest.approx(lb, abs=0), "mask": pytest.approx(lm, abs=0)}


def test_seg_loss_perfect_and_box_only():
    gt = np.zeros((1, 4, 4), bool)
    gt[0, 1:3, 1:3] = True
    probs = Tensor(np.stack([~gt, gt], axis=1).astype(float))
    boxes = np.array([[0.4, 0.5, -1.0, -1.2]])
    assert float(seg_loss(SegPrediction(probs, Tensor(boxes.copy())), SegTarget(gt, boxes)).value.data) == 0.0
    off = Tensor(boxes + 0.3)
    got = float(seg_loss(SegPrediction(probs, off), SegTarget(gt, boxes)).value.data)
    assert got == float(box_loss(off, boxes).value.data)


def test_seg_loss_bce_variant_uses_foreground_channel():
    gt = np.array([[[1, 0], [0, 0]]], dtype=bool)
    p = np.array([[[0.8, 0.3], [0.1, 0.2]]])
    probs = Tensor(np.stack([1 - p, p], axis=1))
    got = float(seg_loss(SegPrediction(probs), SegTarget(gt), mask_kind="bce").value.data)
    assert got == pytest.approx(float(bce(Tensor(p), gt).value.data), abs=1e-15)


def test_binary_patterns_helper_counts():
    assert sum(1 for _ in all_binary_patterns(4)) == 2 + 4 + 8 + 16
    assert list(itertools.islice(all_binary_patterns(1), 2))[1].tolist() == [True]
