import numpy as np
import pytest

from caap import tensor as T
from caap.backbone import build_backbone
from caap.info_region import (
    Region,
    RegionConfig,
    augment_batch,
    augment_with_protection,
    choose_region,
    paste_back,
    protection_mask,
    region_scores,
    saliency,
    select_region,
)
from caap.transforms import RngStream, TransformId, apply_sequence, transform_set

from conftest import numeric_grad

TS = transform_set(True)


@pytest.fixture(scope="module")
def model():
    return build_backbone("mini_fcn", 2, 3, 0)


# -- saliency ------------------------------------------------------------------------


def test_saliency_zero_for_input_blind_model(rng):
    m = build_backbone("mini_fcn", 2, 3, 0)
    m.layers["conv1"].w.data[:] = 0.0
    np.testing.assert_array_equal(saliency(m, rng.standard_normal((2, 40)), 1), 0.0)


def test_saliency_ignores_head_bias_shift(model, rng):
    x = rng.standard_normal((2, 40))
    before = saliency(model, x, 2)
    model.head.b.data += 3.0
    try:
        np.testing.assert_allclose(saliency(model, x, 2), before, atol=1e-12)
    finally:
        model.head.b.data -= 3.0


def test_saliency_matches_finite_differences(model, rng):
    x = rng.standard_normal((2, 32))
    y = 1
    num = numeric_grad(lambda v: T.cross_entropy(model(v[None]), [y]).item(), x)
    np.testing.assert_allclose(saliency(model, x, y), np.abs(num).sum(axis=0), atol=1e-3)


def test_saliency_batch_rows_equal_single(model, rng):
    x = rng.standard_normal((3, 2, 40))
    y = np.array([0, 1, 2])
    batch = saliency(model, x, y)
    for i in range(3):
        np.testing.assert_allclose(batch[i], saliency(model, x[i], y[i]), atol=1e-14)
    assert np.all(batch >= 0)


def test_saliency_leaves_model_params_untouched(model, rng):
    before = model.state()
    saliency(model, rng.standard_normal((2, 40)), 0)
    for k, v in model.state().items():
        np.testing.assert_array_equal(v, before[k])
    assert all(p.requires_grad for p in model.params())


# -- scoring and selection -----------------------------------------------------------


def test_region_scores_oracle():
    cfg = RegionConfig(filter_len=2, thres=60, stride=1)
    assert [r.score for r in region_scores(np.array([1.0, 2, 3, 4]), cfg)] == [1.5, 2.5, 3.5]
    assert [r.score for r in region_scores(np.full(9, 0.7), RegionConfig(4))] == [pytest.approx(0.7)] * 6
    whole = region_scores(np.arange(5.0), RegionConfig(5))
    assert len(whole) == 1 and whole[0].score == 2.0


def test_region_count_with_stride():
    regs = region_scores(np.zeros(20), RegionConfig(filter_len=5, stride=3))
    assert len(regs) == (20 - 5) // 3 + 1
    assert [r.start for r in regs] == [0, 3, 6, 9, 12, 15]


def test_region_too_long():
    with pytest.raises(ValueError):
        region_scores(np.zeros(4), RegionConfig(filter_len=5))


def test_select_region_percentile_rule():
    regions = [Region(i, 1, float(s)) for i, s in enumerate([1, 2, 3, 4, 5])]
    gen = np.random.default_rng(0)
    picked = {select_region(regions, 60, gen).score for _ in range(200)}
    assert picked == {4.0, 5.0}
    assert {select_region(regions, 0, gen).score for _ in range(500)} == {1.0, 2.0, 3.0, 4.0, 5.0}
    with pytest.raises(ValueError):
        select_region([], 60, gen)


def test_select_region_ties_uniform():
    regions = [Region(i, 1, 1.0) for i in range(4)]
    gen = np.random.default_rng(1)
    counts = np.bincount([select_region(regions, 60, gen).start for _ in range(8000)], minlength=4)
    np.testing.assert_allclose(counts / 8000, 0.25, atol=0.03)


# -- paste back ------------------------------------------------------------------------


def test_paste_back_splice(rng):
    x, a = rng.standard_normal((2, 8)), rng.standard_normal((2, 8))
    out = paste_back(x, a, Region(2, 2, 0.0))
    np.testing.assert_array_equal(out[:, 2:4], x[:, 2:4])
    np.testing.assert_array_equal(out[:, [0, 1, 4, 5, 6, 7]], a[:, [0, 1, 4, 5, 6, 7]])
    np.testing.assert_array_equal(paste_back(x, a, Region(0, 8, 0.0)), x)
    np.testing.assert_array_equal(paste_back(x, x, Region(3, 2, 0.0)), x)


def test_paste_back_bounds(rng):
    x = rng.standard_normal((2, 8))
    with pytest.raises(ValueError):
        paste_back(x, x, Region(7, 2, 0.0))
    with pytest.raises(ValueError):
        paste_back(x, x[:, :6], Region(0, 2, 0.0))


# -- protection ------------------------------------------------------------------------


def test_identity_ops_return_input(model, rng):
    x = rng.standard_normal((2, 128))
    out = augment_with_protection(model, x, 0, [(TransformId.IDENTITY, 0.3)], RegionConfig(), RngStream(0))
    np.testing.assert_array_equal(out, x)


def test_time_mask_inside_region_is_undone(model, rng):
    x = rng.standard_normal((2, 128))
    cfg = RegionConfig(filter_len=100)
    # find a mask draw that lies entirely inside the protected window
    for k in range(500):
        ops = [(TransformId.TIME_MASK, 0.2)]
        s = RngStream(k, ("s",))
        masked = apply_sequence(ops, x, s)
        cols = np.flatnonzero(np.all(masked == 0, axis=0))
        r = choose_region(saliency(model, x, 1), cfg, s)
        if cols.size and r.start <= cols[0] and cols[-1] < r.stop:
            np.testing.assert_array_equal(augment_with_protection(model, x, 1, ops, cfg, s), x)
            break
    else:
        pytest.fail("no mask draw fell inside the region")


def test_region_protection_random_cases(model):
    """Selected region is bit-equal to the input and scores at or above the percentile cut."""
    gen = np.random.default_rng(11)
    cfg = RegionConfig(filter_len=30, thres=60.0)
    for case in range(100):
        x = gen.standard_normal((2, 96))
        y = int(gen.integers(0, 3))
        n_ops = int(gen.integers(1, 5))
        ops = [(TS[int(gen.integers(len(TS)))], float(gen.uniform())) for _ in range(n_ops)]
        stream = RngStream(case, ("prot",))
        out = augment_with_protection(model, x, y, ops, cfg, stream)
        slc = saliency(model, x, y)
        region = choose_region(slc, cfg, stream)
        np.testing.assert_array_equal(out[:, region.start : region.stop], x[:, region.start : region.stop])
        scores = [r.score for r in region_scores(slc, cfg)]
        assert region.score >= np.percentile(scores, 60.0)


def test_disabled_module_is_plain_apply(model, rng):
    x = rng.standard_normal((2, 64))
    ops = [(TransformId.SIGN_FLIP, 0.5), (TransformId.GAUSSIAN_NOISE, 0.4)]
    stream = RngStream(2)
    out = augment_with_protection(model, x, 0, ops, RegionConfig(filter_len=20), stream, enabled=False)
    np.testing.assert_array_equal(out, apply_sequence(ops, x, stream))


def test_augment_batch_matches_per_sample(model, rng):
    x = rng.standard_normal((4, 2, 64))
    y = np.array([0, 1, 2, 0])
    ops = [[(TransformId.SIGN_FLIP, 0.5)], [(TransformId.IDENTITY, 0.1)], [(TransformId.TIME_MASK, 0.5)], [(TransformId.SCALING, 0.3)]]
    cfg = RegionConfig(filter_len=20)
    streams = [RngStream(0, ("b", i)) for i in range(4)]
    out = augment_batch(model, x, y, ops, cfg, streams)
    for i in range(4):
        np.testing.assert_allclose(out[i], augment_with_protection(model, x[i], y[i], ops[i], cfg, streams[i]), atol=1e-12)
    np.testing.assert_array_equal(out[1], x[1])


def test_protection_mask_marks_one_window(model, rng):
    x = rng.standard_normal((3, 2, 64))
    mask = protection_mask(model, x, np.array([0, 1, 2]), RegionConfig(filter_len=16), [RngStream(0, (i,)) for i in range(3)])
    assert mask.shape == (3, 64)
    for row in mask:
        cols = np.flatnonzero(row)
        assert len(cols) == 16 and cols[-1] - cols[0] == 15
