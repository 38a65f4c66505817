import numpy as np
import pytest

from metaseg.boxes import Box
from metaseg.diffcore import Tensor
from metaseg.errors import ConfigError, StructureError
from metaseg.segmodel import (ArchConfig, ModelParams, _backbone, _bind, assemble_full_mask, check_params,
                              crop_mask, forward, init_model, seg_objective, training_priors)

SMALL = ArchConfig(backbone=(8, 8), groups=4, box_levels=(1,), box_window=2, box_hidden=6,
                   mask_window=6, mask_levels=(0,), mask_channels=(8,), train_priors=2, dtype="float64")


def _scene(seed, size=16):
    rng = np.random.default_rng(seed)
    frame = rng.uniform(size=(3, size, size))
    mask = np.zeros((size, size), bool)
    y0, x0 = rng.integers(1, size // 2, size=2)
    mask[y0:y0 + 6, x0:x0 + 5] = True
    frame[0][mask] += 0.5
    return frame, mask


def test_init_deterministic_and_copies_independent():
    a, b = init_model(seed=3), init_model(seed=3)
    assert a.equal(b)
    c = a.copy()
    c.layers[0].weight[...] = 0
    assert not a.equal(c) and a.equal(b)
    assert not init_model(seed=4).equal(a)


def test_neuron_count_is_structural():
    arch = ArchConfig()
    p = init_model(arch)
    conv = sum(arch.backbone) + sum(arch.mask_channels) + 2
    norms = sum(arch.backbone) + sum(arch.mask_channels)
    fc = arch.box_hidden + 4
    assert p.n_neurons == conv + norms + fc
    assert p.n_scalars == sum(a.size for a in p.arrays())
    check_params(p, arch)
    with pytest.raises(StructureError):
        check_params(p, SMALL)


def test_he_std_for_64_channel_layer():
    arch = ArchConfig()
    p = init_model(arch, seed=0)
    w = p["conv3"].weight
    fan_in = np.prod(w.shape[1:])
    assert abs(w.std() / np.sqrt(2.0 / fan_in) - 1.0) < 0.2
    assert np.all(p["conv3"].bias == 0) and np.all(p["gn3"].weight == 1)


def test_invalid_arch_rejected():
    with pytest.raises(ConfigError):
        init_model(ArchConfig(backbone=(12, 16), groups=8))
    with pytest.raises(ConfigError):
        init_model(ArchConfig(box_levels=(7,)))


def test_forward_full_frame_prior_with_zero_box_head():
    p = init_model(SMALL, seed=0)
    p["box_fc2"].weight[...] = 0
    frame, _ = _scene(0)
    pred = forward(p, frame, [Box.full_frame(16, 16)], SMALL)
    assert pred.box.as_tuple() == Box.full_frame(16, 16).as_tuple()
    assert not pred.fallback


def test_forward_degenerate_box_falls_back_to_full_frame():
    p = init_model(SMALL, seed=0)
    p["box_fc2"].weight[...] = 0
    p["box_fc2"].bias[...] = [0, 0, -3, -3]
    frame, _ = _scene(1)
    pred = forward(p, frame, [Box(8, 8, 2, 2)], SMALL)
    assert pred.fallback
    assert pred.box.as_tuple() == Box.full_frame(16, 16).as_tuple()


@pytest.mark.parametrize("seed", range(5))
def test_forward_mask_support_inside_box_and_deterministic(seed):
    p = init_model(SMALL, seed=seed)
    frame, mask = _scene(seed)
    prior = Box.from_mask(mask)
    before = [a.copy() for a in p.arrays()]
    a = forward(p, frame, [prior], SMALL)
    b = forward(p, frame, [prior], SMALL)
    np.testing.assert_array_equal(a.mask_full, b.mask_full)
    assert a.box.as_tuple() == b.box.as_tuple()
    for x, y in zip(before, p.arrays()):
        np.testing.assert_array_equal(x, y)
    x0, y0, x1, y1 = a.box.clip(16, 16).corners
    ys, xs = np.nonzero(a.mask_full)
    assert np.all((ys + 0.5 >= y0) & (ys + 0.5 < y1) & (xs + 0.5 >= x0) & (xs + 0.5 < x1))
    assert a.mask_full.min() >= 0 and a.mask_full.max() <= 1
    np.testing.assert_allclose(a.mask_local.sum(axis=0), 1.0, atol=1e-12)


def test_assemble_identity_zero_and_constant():
    rng = np.random.default_rng(0)
    fg = rng.uniform(size=(8, 8))
    local = np.stack([1 - fg, fg])
    np.testing.assert_allclose(assemble_full_mask(local, Box.full_frame(8, 8), (8, 8)), fg, atol=1e-14)
    assert not assemble_full_mask(np.zeros((2, 5, 5)), Box(4, 4, 4, 4), (8, 8)).any()
    half = assemble_full_mask(np.full((2, 5, 5), 0.7), Box.from_corners(0, 0, 4, 8), (8, 8))
    expect = np.zeros((8, 8))
    expect[:, :4] = 0.7
    np.testing.assert_allclose(half, expect, atol=1e-14)


def test_crop_mask_full_box_is_identity():
    m = np.zeros((6, 6), bool)
    m[1:4, 2:5] = True
    np.testing.assert_array_equal(crop_mask(m, Box.full_frame(6, 6), 6), m)


def test_training_priors_shape():
    rng = np.random.default_rng(0)
    pri = training_priors(Box(10, 10, 6, 6), (32, 32), SMALL, rng)
    assert len(pri) == 1 + SMALL.train_priors
    assert pri[0].as_tuple() == Box.full_frame(32, 32).as_tuple()


def test_backbone_batch_independence():
    p = init_model(SMALL, seed=2)
    frames = np.stack([_scene(s)[0] for s in range(3)])
    bound = _bind(p, False)
    batch = _backbone(bound, SMALL, Tensor(frames))
    single = _backbone(bound, SMALL, Tensor(frames[1:2]))
    for fb, fs in zip(batch, single):
        np.testing.assert_allclose(fb.data[1:2], fs.data, atol=1e-12)


def _objective_inputs(seed):
    frames, masks, boxes, priors = [], [], [], []
    rng = np.random.default_rng(seed)
    for s in range(2):
        f, m = _scene(seed * 10 + s)
        frames.append(f)
        masks.append(m)
        b = Box.from_mask(m)
        boxes.append(b)
        priors.append(training_priors(b, (16, 16), SMALL, rng))
    return np.stack(frames), np.stack(masks), boxes, priors


@pytest.mark.parametrize("mask_kind", ["lovasz", "bce"])
def test_end_to_end_gradient_matches_finite_differences(mask_kind):
    params = init_model(SMALL, seed=1)
    frames, masks, boxes, priors = _objective_inputs(1)
    obj = seg_objective(params, SMALL, frames, masks, boxes, priors, mask_kind)
    rng = np.random.default_rng(0)
    base = params.arrays()
    worst, eps = 0.0, 1e-6
    for k, arr in enumerate(base):
        layer = params.layers[k // 2]
        n_neurons = layer.n_neurons
        picked = rng.choice(n_neurons, size=min(50, n_neurons), replace=False)
        for j in picked:
            flat = np.ravel_multi_index((j,) + tuple(0 for _ in arr.shape[1:]), arr.shape) if arr.ndim > 1 else j
            # one random coordinate inside the neuron's block
            if arr.ndim > 1:
                inner = rng.integers(int(np.prod(arr.shape[1:])))
                flat = flat + inner
            vals = []
            for sign in (1, -1):
                pert = [a.copy() for a in base]
                pert[k].reshape(-1)[flat] += sign * eps
                p2 = params.with_arrays(pert)
                vals.append(float(seg_objective(p2, SMALL, frames, masks, boxes, priors, mask_kind,
                                                with_grad=False).loss.value.data))
            fd = (vals[0] - vals[1]) / (2 * eps)
            a = obj.grads[k].reshape(-1)[flat]
            worst = max(worst, abs(a - fd) / max(1.0, abs(fd)))
    assert worst < 1e-3


def test_objective_without_boxes_is_zero():
    params = init_model(SMALL)
    frames, masks, _, priors = _objective_inputs(0)
    obj = seg_objective(params, SMALL, frames, masks, [None, None], priors)
    assert float(obj.loss.value.data) == 0.0
    assert all(not g.any() for g in obj.grads)


def test_with_arrays_structure_checks():
    p = init_model(SMALL)
    with pytest.raises(StructureError):
        p.with_arrays(p.arrays()[:-1])
    assert isinstance(p.with_arrays(p.arrays()), ModelParams)
