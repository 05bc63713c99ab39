import numpy as np
import pytest

from caap.regulation import (
    RegulationState,
    blend_policy,
    compute_noaug_weights,
    noaug_distribution,
    regulate,
)
from caap.transforms import TransformId, transform_set

TS = transform_set()


def test_noaug_weight_oracle_values():
    assert compute_noaug_weights([1.0], 0.5)[0] == 0.0
    assert compute_noaug_weights([0.6], 0.5)[0] == 0.2
    assert compute_noaug_weights([0.0], 1.0)[0] == 1.0
    assert compute_noaug_weights([0.0], 3.0)[0] == 1.0  # clamped


def test_noaug_weights_validate_inputs():
    with pytest.raises(ValueError):
        compute_noaug_weights([0.5], -0.1)
    with pytest.raises(ValueError):
        compute_noaug_weights([1.2], 0.5)


def test_noaug_weights_monotone_in_recall():
    recall = np.linspace(0, 1, 11)
    w = compute_noaug_weights(recall, 0.5)
    assert np.all(np.diff(w) < 0)


def test_blend_oracle_values():
    p_old = np.array([0.5, 0.5, 0.0])
    p_no = np.array([0.0, 0.0, 1.0])
    np.testing.assert_array_equal(blend_policy(p_old, 0.2, p_no), [0.4, 0.4, 0.2])
    np.testing.assert_array_equal(blend_policy(p_old, 0.0, p_no), p_old)
    np.testing.assert_array_equal(blend_policy(p_old, 1.0, p_no), p_no)
    with pytest.raises(ValueError):
        blend_policy(p_old, 1.5, p_no)


def test_noaug_distribution():
    d = noaug_distribution(TS)
    assert d[TS.index(TransformId.IDENTITY)] == 1.0 and d.sum() == 1.0
    assert len(d) == 10
    with pytest.raises(ValueError):
        noaug_distribution([TransformId.SIGN_FLIP, TransformId.TIME_MASK])
    full = blend_policy(np.full(10, 0.1), 1.0, d)
    np.testing.assert_array_equal(full, d)


def test_regulate_rows_use_class_weights(rng):
    p = rng.dirichlet(np.ones(10), size=6)
    labels = np.array([0, 1, 2, 0, 1, 2])
    state = RegulationState.from_recall([1.0, 0.6, 0.0], alpha=0.5)
    np.testing.assert_array_equal(state.w_noaug, [0.0, 0.2, 0.5])
    out = regulate(p, labels, state, TS)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out >= 0)
    np.testing.assert_array_equal(out[0], p[0])
    np.testing.assert_array_equal(out[1], 0.8 * p[1] + 0.2 * noaug_distribution(TS))


def test_alpha_zero_is_identity(rng):
    p = rng.dirichlet(np.ones(10), size=4)
    state = RegulationState.from_recall([0.1, 0.2, 0.3], alpha=0.0)
    np.testing.assert_array_equal(regulate(p, np.array([0, 1, 2, 0]), state, TS), p)
