import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avkit.calibration import (
    CalibrationModel,
    ScoreSet,
    TrialKey,
    apply_calibration,
    calibration_objective,
    objective,
    train_calibration,
)
from avkit.errors import ContractError, MissingScoreError
from avkit.metrics import DcfParams, act_dcf, eer, min_dcf, roc_points


def gaussian_trials(rng, n_tar, n_non, mean, std):
    """Scores with targets ~ N(mean, std^2) and nontargets ~ N(-mean, std^2).

    The true LLR of such a score is 2 * mean * x / std^2.
    """
    trials = [(f"m{i}", f"s{i}") for i in range(n_tar + n_non)]
    labels = np.arange(n_tar + n_non) < n_tar
    x = np.where(labels, mean, -mean) + std * rng.standard_normal(n_tar + n_non)
    order = rng.permutation(len(trials))
    trials = [trials[i] for i in order]
    return trials, x[order], labels[order]


def make_sets(trials, labels, *columns):
    key = TrialKey(dict(zip(trials, labels.tolist())))
    return [ScoreSet.from_arrays(f"sys{i}", trials, col) for i, col in enumerate(columns)], key


def test_well_calibrated_scores_learn_identity():
    rng = np.random.default_rng(0)
    # mean 2, variance 4 -> the score itself is the true LLR
    trials, x, labels = gaussian_trials(rng, 2000, 8000, 2.0, 2.0)
    sets, key = make_sets(trials, labels, x)
    model = train_calibration(sets, key, prior=0.05)
    assert 0.8 <= model.weights[0] <= 1.2
    assert abs(model.bias) < 0.3


def test_zero_separation():
    rng = np.random.default_rng(1)
    trials, x, labels = gaussian_trials(rng, 1000, 4000, 0.0, 1.0)
    sets, key = make_sets(trials, labels, x)
    model = train_calibration(sets, key, prior=0.05)
    assert abs(model.weights[0]) < 0.05
    fused = apply_calibration(model, sets).values(trials)
    assert np.ptp(fused) < 0.5
    tar, non = fused[labels], fused[~labels]
    assert act_dcf(tar, non, DcfParams(0.05)) == pytest.approx(1.0, abs=0.02)


def test_duplicated_systems_keep_ranking():
    rng = np.random.default_rng(2)
    trials, x, labels = gaussian_trials(rng, 500, 2000, 1.0, 1.0)
    single_sets, key = make_sets(trials, labels, x)
    dup_sets, _ = make_sets(trials, labels, x, x)
    single = apply_calibration(train_calibration(single_sets, key), single_sets).values(trials)
    dup_model = train_calibration(dup_sets, key)
    dup = apply_calibration(dup_model, dup_sets).values(trials)
    np.testing.assert_array_equal(np.argsort(single, kind="stable"), np.argsort(dup, kind="stable"))
    assert eer(roc_points(dup[labels], dup[~labels])) == eer(roc_points(single[labels], single[~labels]))
    # the duplicated columns share the single-system weight
    assert dup_model.weights.sum() == pytest.approx(
        train_calibration(single_sets, key).weights[0], rel=1e-6
    )


def test_optimality_witness_and_gradient():
    rng = np.random.default_rng(3)
    trials, x, labels = gaussian_trials(rng, 400, 1600, 1.5, 1.0)
    y = 0.5 * x + rng.standard_normal(x.size)
    sets, key = make_sets(trials, labels, x, y)
    model = train_calibration(sets, key, prior=0.05)
    baseline = CalibrationModel(["sys0", "sys1"], [1.0, 1.0], 0.0, 0.05)
    assert calibration_objective(model, sets, key) <= calibration_objective(baseline, sets, key)
    X = np.column_stack([x, y])
    params = np.append(model.weights, model.bias)
    _, grad, _ = objective(params, X, labels, 0.05)
    assert np.max(np.abs(grad)) < 1e-8


def test_objective_derivatives_match_finite_differences():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((60, 2))
    labels = rng.random(60) < 0.3
    params = np.array([0.7, -0.4, 0.2])
    value, grad, hess = objective(params, X, labels, 0.2, ridge=0.1)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        up, g_up, _ = objective(params + e, X, labels, 0.2, ridge=0.1)
        down, g_down, _ = objective(params - e, X, labels, 0.2, ridge=0.1)
        assert (up - down) / (2 * h) == pytest.approx(grad[i], abs=1e-7)
        np.testing.assert_allclose((g_up - g_down) / (2 * h), hess[i], atol=1e-6)


def test_multiple_starts_reach_same_optimum():
    rng = np.random.default_rng(5)
    trials, x, labels = gaussian_trials(rng, 300, 1200, 1.0, 1.0)
    y = x + rng.standard_normal(x.size)
    sets, key = make_sets(trials, labels, x, y)
    values = []
    for init in ([0, 0, 0], [3, -2, 5], [-1, 0.5, -4], [0.1, 0.1, 0.1]):
        model = train_calibration(sets, key, init=init)
        values.append(calibration_objective(model, sets, key))
    assert max(values) - min(values) < 1e-9


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10.0), shift=st.floats(-5.0, 5.0))
def test_shift_scale_absorption(seed, scale, shift):
    rng = np.random.default_rng(seed)
    trials, x, labels = gaussian_trials(rng, 100, 400, 1.0, 1.0)
    y = 0.3 * x + rng.standard_normal(x.size)
    sets, key = make_sets(trials, labels, x, y)
    moved, _ = make_sets(trials, labels, scale * x + shift, y)
    m1 = train_calibration(sets, key)
    m2 = train_calibration(moved, key)
    assert calibration_objective(m1, sets, key) == pytest.approx(
        calibration_objective(m2, moved, key), abs=1e-8
    )
    f1 = apply_calibration(m1, sets).values(trials)
    f2 = apply_calibration(m2, moved).values(trials)
    np.testing.assert_array_equal(np.argsort(f1, kind="stable"), np.argsort(f2, kind="stable"))
    # both fits stop on a gradient tolerance, so outputs agree to optimizer precision only
    np.testing.assert_allclose(f1, f2, rtol=1e-4, atol=1e-5)


def test_apply_examples():
    trials = [("a", "x"), ("b", "y")]
    s = ScoreSet.from_arrays("s", trials, [1.5, -2.0])
    ident = CalibrationModel(["s"], [1.0], 0.0, 0.05)
    np.testing.assert_array_equal(apply_calibration(ident, [s]).values(trials), [1.5, -2.0])
    s1 = ScoreSet.from_arrays("s1", [("a", "x")], [2.0])
    s2 = ScoreSet.from_arrays("s2", [("a", "x")], [4.0])
    half = CalibrationModel(["s1", "s2"], [0.5, 0.5], 0.0, 0.05)
    assert apply_calibration(half, [s1, s2])[("a", "x")] == 3.0


def test_apply_preserves_order_with_positive_weights():
    rng = np.random.default_rng(6)
    trials = [(f"m{i}", "t") for i in range(50)]
    a = rng.standard_normal(50)
    fixed = np.full(50, 0.7)
    model = CalibrationModel(["a", "b"], [0.8, 2.0], -1.0, 0.05)
    out = apply_calibration(
        model, [ScoreSet.from_arrays("a", trials, a), ScoreSet.from_arrays("b", trials, fixed)]
    ).values(trials)
    np.testing.assert_array_equal(np.argsort(out), np.argsort(a))


def test_apply_order_independent():
    trials = [("a", "1"), ("b", "2"), ("c", "3")]
    s = ScoreSet.from_arrays("s", trials, [0.1, 0.2, 0.3])
    model = CalibrationModel(["s"], [2.0], 1.0, 0.05)
    forward = apply_calibration(model, [s])
    backward = apply_calibration(model, [s], trials=trials[::-1])
    assert forward.entries == backward.entries


def test_missing_scores_are_errors():
    trials = [("a", "1"), ("b", "2")]
    key = TrialKey({trials[0]: True, trials[1]: False})
    partial = ScoreSet.from_arrays("s", trials[:1], [1.0])
    with pytest.raises(MissingScoreError, match="b"):
        train_calibration([partial], key)
    with pytest.raises(MissingScoreError):
        apply_calibration(CalibrationModel(["s"], [1.0], 0.0, 0.05), [partial], trials=trials)


def test_training_contract_errors():
    trials = [("a", "1"), ("b", "2")]
    s = ScoreSet.from_arrays("s", trials, [1.0, 2.0])
    with pytest.raises(ContractError):
        train_calibration([s], TrialKey({trials[0]: True, trials[1]: True}))
    with pytest.raises(ContractError):
        train_calibration([s], TrialKey({trials[0]: True, trials[1]: False}), prior=1.0)
    with pytest.raises(ContractError):
        ScoreSet.from_arrays("s", [("a", "1")], [np.nan])
    with pytest.raises(ContractError):
        TrialKey({})


def test_ridge_keeps_separable_problem_finite():
    trials = [(f"m{i}", "t") for i in range(20)]
    labels = np.arange(20) < 5
    x = np.where(labels, 3.0, -3.0) + np.linspace(0, 0.1, 20)
    sets, key = make_sets(trials, labels, x)
    model = train_calibration(sets, key, ridge=1e-2)
    assert np.all(np.isfinite(model.weights))
    assert model.weights[0] > 0


def test_calibrated_act_dcf_close_to_min_dcf():
    rng = np.random.default_rng(7)
    trials, x, labels = gaussian_trials(rng, 2000, 8000, 1.2, 1.0)
    raw = 3.0 * x + 1.0  # badly calibrated but informative
    sets, key = make_sets(trials, labels, raw)
    model = train_calibration(sets, key, prior=0.05)
    llr = apply_calibration(model, sets).values(trials)
    params = DcfParams(0.05)
    mn = min_dcf(roc_points(llr[labels], llr[~labels]), params)
    assert act_dcf(llr[labels], llr[~labels], params) <= 1.10 * mn


def test_non_convergence_is_numerical_error():
    from avkit.errors import NumericalError

    rng = np.random.default_rng(8)
    trials, x, labels = gaussian_trials(rng, 50, 200, 1.0, 1.0)
    sets, key = make_sets(trials, labels, x)
    with pytest.raises(NumericalError, match="converge"):
        train_calibration(sets, key, max_iter=1)
