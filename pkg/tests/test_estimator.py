import numpy as np
import pytest

from conftest import EXPERTS, FAMILIES, random_dense, random_model, random_softmax
from moelab.data_gen import Dataset, InputDistribution, generate_dataset
from moelab.estimator import (
    FitConfig,
    FitFailure,
    clip_to_box,
    ModelFamily,
    ThetaBox,
    fit,
    levenberg_marquardt,
    ls_gradient,
    ls_objective,
    project_to_box,
    warm_start,
)
from moelab.model_core import ExpertFamily, HierarchicalMixingMeasure, SoftmaxMixingMeasure


def _data(model, n=200, nu=0.0, seed=0):
    return generate_dataset(model, InputDistribution(model.d), n, nu, seed)


def test_objective_examples(rng):
    truth = random_softmax(rng, ExpertFamily.ffn("sigmoid"), k=2)
    assert ls_objective(truth, _data(truth)) == 0.0
    noisy = _data(truth, n=5000, nu=0.01, seed=4)
    # chi-square with n degrees of freedom, 3 sigma band
    assert abs(ls_objective(truth, noisy) - 5000 * 0.01) <= 3 * 0.01 * np.sqrt(2 * 5000)
    zero = SoftmaxMixingMeasure([0.0], [[0.0, 0.0]], [[0.0, 0.0, 0.0]], ExpertFamily.linear())
    ones = Dataset(np.zeros((5, 2)), np.ones(5), 0.0, 0)
    assert ls_objective(zero, ones) == pytest.approx(5.0)


def test_objective_dimension_mismatch(rng):
    truth = random_softmax(rng, ExpertFamily.linear(), k=2)
    with pytest.raises(ValueError):
        ls_objective(truth, Dataset(np.zeros((3, 3)), np.zeros(3), 0.0, 0))


def _fd(model, data):
    v = model.free_vector()
    out = np.empty_like(v)
    for i in range(v.size):
        h = 1e-6 * max(1.0, abs(v[i]))
        up, dn = v.copy(), v.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (ls_objective(model.with_free_vector(up), data) - ls_objective(model.with_free_vector(dn), data)) / (2 * h)
    return out


@pytest.mark.parametrize("family", FAMILIES)
def test_gradient_matches_finite_differences(family):
    rng = np.random.default_rng(len(family))
    for trial in range(13):
        expert = EXPERTS[trial % len(EXPERTS)]
        truth = random_model(rng, family, expert)
        model = random_model(rng, family, expert)
        data = _data(truth, n=30, nu=0.01, seed=trial)
        g = ls_gradient(model, data).values
        fd = _fd(model, data)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-6)


def test_gradient_vanishes_at_exact_fit(rng):
    truth = random_softmax(rng, ExpertFamily.ffn("tanh"), k=2)
    assert np.linalg.norm(ls_gradient(truth, _data(truth)).values) <= 1e-8


def test_gradient_linear_in_residual(rng):
    truth = random_softmax(rng, ExpertFamily.linear(), k=2)
    data = _data(truth, n=50)
    shifted = Dataset(data.inputs, data.responses + 1.0, 0.0, 0)
    doubled = Dataset(data.inputs, data.responses + 2.0, 0.0, 0)
    g1, g2 = ls_gradient(truth, shifted).values, ls_gradient(truth, doubled).values
    assert np.allclose(g2, 2 * g1)


def test_projection_examples(rng):
    box = ThetaBox()
    G = random_softmax(rng, ExpertFamily.linear(), k=2)
    assert np.array_equal(project_to_box(G, box).free_vector(), G.free_vector())
    far = G.replace(betas=np.array([7.0, 0.0]), pinned_last=True)
    assert project_to_box(far, box).betas[0] == 5.0
    D = random_dense(rng, ExpertFamily.linear(), k=2)
    v = D.free_vector()
    v[-1] = -1.0
    assert clip_to_box(v, D.layout, box)[-1] == 0.1
    v[-1] = 0.01
    assert project_to_box(D.with_free_vector(v), box).tau == 0.1


def test_realizable_single_atom_fit(rng):
    truth = random_softmax(rng, ExpertFamily.ffn("sigmoid"), k=1)
    res = fit(_data(truth), ModelFamily.like(truth, 1), FitConfig(k_fit=1, restarts=1, init_mode="warm"),
              seed=0, truth=truth)
    assert res.objective <= 1e-10


def test_over_specified_zero_noise_fit(rng):
    truth = random_softmax(rng, ExpertFamily.ffn("tanh"), k=2)
    cfg = FitConfig(k_fit=3, restarts=2, init_mode="warm")
    res = fit(_data(truth, n=300), ModelFamily.like(truth, 3), cfg, seed=1, truth=truth)
    assert res.objective <= 1e-8
    assert res.fitted.k == 3


def test_fit_is_deterministic(rng):
    truth = random_softmax(rng, ExpertFamily.ffn("gelu"), k=2)
    data = _data(truth, n=150, nu=0.01, seed=3)
    cfg = FitConfig(k_fit=2, restarts=3, init_mode="mixed", max_iters=300)
    a = fit(data, ModelFamily.like(truth, 2), cfg, seed=8, truth=truth)
    b = fit(data, ModelFamily.like(truth, 2), cfg, seed=8, truth=truth)
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("family", FAMILIES)
def test_fit_respects_pinning_box_and_winner(family):
    rng = np.random.default_rng(99)
    truth = random_model(rng, family, ExpertFamily.ffn("sigmoid"))
    data = _data(truth, n=120, nu=0.01, seed=2)
    k = truth.k_inner if isinstance(truth, HierarchicalMixingMeasure) else truth.k
    cfg = FitConfig(k_fit=k, restarts=3, init_mode="mixed", max_iters=200)
    res = fit(data, ModelFamily.like(truth, k), cfg, seed=0, truth=truth)
    G = res.fitted
    assert cfg.theta_box.contains(G)
    if isinstance(G, HierarchicalMixingMeasure):
        assert G.betas[-1] == 0 and np.all(G.omegas[-1] == 0)
        assert np.all(G.nus[:, -1] == 0) and np.all(G.kappas[:, -1] == 0)
    else:
        assert G.betas[-1] == 0 and np.all(G.omegas[-1] == 0)
    assert res.objective <= min(res.restart_objectives)
    assert abs(ls_objective(G, data) - res.objective) <= 1e-9 * max(res.objective, 1e-300)


def test_warm_start_at_truth_converges_quickly(rng):
    truth = random_softmax(rng, ExpertFamily.ffn("tanh"), k=2)
    cfg = FitConfig(k_fit=2, restarts=1, init_mode="warm", warm_perturbation_scale=0.0)
    res = fit(_data(truth), ModelFamily.like(truth, 2), cfg, seed=0, truth=truth)
    assert res.converged and res.iterations <= 10


def test_lm_objective_is_monotone(rng):
    truth = random_softmax(rng, ExpertFamily.ffn("sigmoid"), k=2)
    data = _data(truth, n=200, nu=0.01, seed=1)
    start = random_softmax(rng, ExpertFamily.ffn("sigmoid"), k=2)
    trace = levenberg_marquardt(start, data.inputs, data.responses, ThetaBox(),
                                FitConfig(k_fit=2, max_iters=100)).trace
    assert len(trace) > 1
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_all_diverged_raises(rng):
    truth = random_softmax(rng, ExpertFamily.linear(), k=2)
    bad = Dataset(np.zeros((4, 2)), np.array([np.nan] * 4), 0.0, 0)
    with pytest.raises(FitFailure):
        fit(bad, ModelFamily.like(truth, 2), FitConfig(k_fit=2, restarts=2, init_mode="cold", max_iters=5), seed=0)


def test_warm_start_duplicates_first_atom(rng):
    truth = random_softmax(rng, ExpertFamily.linear(), k=2)
    G = warm_start(truth, ModelFamily.like(truth, 3))
    X = rng.uniform(-1, 1, (30, 2))
    assert G.k == 3
    assert np.allclose(G.evaluate(X), truth.evaluate(X), atol=1e-12)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        FitConfig(k_fit=2, restarts=0)
    with pytest.raises(ValueError):
        FitConfig(k_fit=2, grad_tol=0.0)
    with pytest.raises((ValueError, TypeError)):
        FitConfig.from_json({"k_fit": 2, "bogus": 1})
