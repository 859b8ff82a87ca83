import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import EXPERTS, FAMILIES, random_dense, random_hier, random_model, random_softmax
from moelab.model_core import (
    Activation,
    DenseToSparseMixingMeasure,
    ExpertFamily,
    ExpertSpec,
    GradientVector,
    HierarchicalMixingMeasure,
    InvalidInputError,
    InvalidParameterError,
    Router,
    SoftmaxMixingMeasure,
    eval_expert,
    eval_regression_dense_to_sparse,
    eval_regression_hierarchical,
    eval_regression_softmax,
    grad_regression,
    measure_from_json,
    softmax_weights,
)

finite = st.floats(-50, 50, allow_nan=False)


# -- softmax


def test_softmax_examples():
    assert np.allclose(softmax_weights([0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(softmax_weights([math.log(3), 0.0]), [0.75, 0.25])
    w = softmax_weights([1000.0, 0.0])
    assert abs(w[0] - 1.0) <= 1e-12 and w[1] <= 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        softmax_weights([np.nan, 0.0])
    with pytest.raises(InvalidInputError):
        softmax_weights([np.inf, 0.0])


@given(arrays(float, st.integers(1, 8), elements=finite))
def test_softmax_is_a_distribution(scores):
    w = softmax_weights(scores)
    assert np.all(w >= 0) and np.all(w <= 1)
    assert abs(w.sum() - 1.0) <= 1e-12


# -- experts


def test_expert_examples():
    assert eval_expert(ExpertSpec.linear([2, -1], 0.5), [1, 1]) == pytest.approx(1.5)
    assert eval_expert(ExpertSpec.ffn([0, 0], 0, 2, "sigmoid"), [0.3, -0.7]) == pytest.approx(1.0)
    assert eval_expert(ExpertSpec.ffn([1, 0], 0, 1, "tanh"), [1, 0]) == pytest.approx(0.76159, abs=1e-5)


def test_ffn_origin_uses_zero_direction():
    e = ExpertSpec.ffn([3, -2], 0.4, 1.5, "sigmoid")
    assert eval_expert(e, [0.0, 0.0]) == pytest.approx(1.5 / (1 + math.exp(-0.4)))


def test_gelu_is_z_times_normal_cdf():
    z = np.array([-2.0, -0.5, 0.0, 1.3])
    from scipy.stats import norm

    assert np.allclose(Activation("gelu").value(z), z * norm.cdf(z), atol=1e-15)


@pytest.mark.parametrize("name", ["sigmoid", "tanh", "gelu", "poly3"])
def test_activation_derivative_matches_difference(name):
    act = Activation.parse(name)
    z = np.linspace(-3, 3, 41)
    h = 1e-6
    assert np.allclose(act.deriv(z), (act.value(z + h) - act.value(z - h)) / (2 * h), atol=1e-7)


def test_expert_family_q():
    assert ExpertFamily.linear().q(3) == 4
    assert ExpertFamily.ffn("tanh").q(3) == 5


# -- regression functions


def test_single_atom_is_the_expert(rng):
    for expert in EXPERTS:
        G = random_softmax(rng, expert, k=1)
        X = rng.uniform(-1, 1, (20, 2))
        assert np.allclose(G.evaluate(X), expert.evaluate(X, G.etas)[:, 0])


def test_identical_experts_ignore_gating(rng):
    G = random_softmax(rng, ExpertFamily.ffn("sigmoid"), k=3)
    G = G.replace(etas=np.repeat(G.etas[:1], 3, axis=0))
    X = rng.uniform(-1, 1, (20, 2))
    assert np.allclose(G.evaluate(X), G.expert.evaluate(X, G.etas[:1])[:, 0])


def test_frozen_softmax_example():
    G = SoftmaxMixingMeasure([0.0, 0.0], [[math.log(3), 0.0], [0.0, 0.0]], [[0, 0, 1.0], [0, 0, 0.0]],
                             ExpertFamily.linear())
    assert eval_regression_softmax(G, [1.0, 0.0]) == pytest.approx(0.75, abs=1e-15)


def test_dense_to_sparse_limits(rng):
    G = random_softmax(rng, ExpertFamily.ffn("sigmoid"), k=2)
    x = np.array([0.4, -0.3])
    hot = DenseToSparseMixingMeasure(G.betas, G.omegas, G.etas, G.expert, True, tau=1e6)
    w = softmax_weights((hot.omegas @ x + hot.betas) / hot.tau)
    assert np.allclose(w, 0.5, atol=1e-5)
    cold = hot.replace(tau=1e-3)
    w = softmax_weights((cold.omegas @ x + cold.betas) / cold.tau)
    assert w.max() >= 1 - 1e-6
    same = hot.replace(tau=1.0)
    X = rng.uniform(-1, 1, (30, 2))
    assert np.array_equal(eval_regression_dense_to_sparse(same, X), eval_regression_softmax(G, X))


def test_dense_to_sparse_rejects_bad_tau(rng):
    G = random_softmax(rng, ExpertFamily.linear(), k=2)
    for tau in (0.0, -1.0):
        with pytest.raises(InvalidParameterError):
            DenseToSparseMixingMeasure(G.betas, G.omegas, G.etas, G.expert, True, tau=tau)


def test_hierarchical_reductions(rng):
    expert = ExpertFamily.ffn("tanh")
    X = rng.uniform(-1, 1, (25, 2))
    one = random_hier(rng, expert, K1=1, K2=1)
    assert np.allclose(one.evaluate(X), expert.evaluate(X, one.etas[0])[:, 0])
    two = random_hier(rng, expert, K1=2, K2=1)
    flat = SoftmaxMixingMeasure(two.betas, two.omegas, two.etas[:, 0], expert)
    assert np.allclose(eval_regression_hierarchical(two, X), flat.evaluate(X), atol=1e-14)
    same = random_hier(rng, expert)
    same = same.replace(etas=np.broadcast_to(same.etas[:1, :1], same.etas.shape).copy())
    assert np.allclose(same.evaluate(X), expert.evaluate(X, same.etas[0, :1])[:, 0])


def test_pinning_is_enforced():
    with pytest.raises(InvalidParameterError):
        SoftmaxMixingMeasure([0.2, 0.1], [[1, 0], [0, 0]], [[0, 0, 0], [1, 1, 1]], ExpertFamily.linear())


@pytest.mark.parametrize("family", FAMILIES)
def test_translation_invariance(family, rng):
    G = random_model(rng, family, ExpertFamily.ffn("sigmoid"))
    X = rng.uniform(-1, 1, (50, 2))
    u0, u1 = rng.normal(), rng.normal(size=2)
    if isinstance(G, HierarchicalMixingMeasure):
        shifted = G.replace(betas=G.betas + u0, omegas=G.omegas + u1, nus=G.nus + u0,
                            kappas=G.kappas + u1, pinned_last_outer=False, pinned_last_inner=False)
    elif isinstance(G, DenseToSparseMixingMeasure) and G.router.kind == "activated":
        shifted = G.replace(betas=G.betas + u0, pinned_last=False)  # only beta shifts cancel here
    else:
        shifted = G.replace(betas=G.betas + u0, omegas=G.omegas + u1, pinned_last=False)
    assert np.max(np.abs(G.evaluate(X) - shifted.evaluate(X))) <= 1e-10


@pytest.mark.parametrize("family", FAMILIES)
def test_permutation_invariance(family, rng):
    G = random_model(rng, family, ExpertFamily.linear())
    X = rng.uniform(-1, 1, (50, 2))
    if isinstance(G, HierarchicalMixingMeasure):
        P = G.permuted_groups([1, 0]).permuted_inner(0, [1, 0])
    else:
        P = G.permuted([2, 0, 1])
    assert np.allclose(G.evaluate(X), P.evaluate(X), atol=1e-13)


# -- gradients


def test_single_atom_linear_gradient():
    G = SoftmaxMixingMeasure([0.0], [[0.0, 0.0]], [[0.3, -0.2, 0.1]], ExpertFamily.linear())
    x = np.array([0.7, -0.4])
    layout = {(s.field, s.coord): v for s, v in zip(G.layout, grad_regression(G, x).values)}
    assert layout[("a", 0)] == pytest.approx(0.7)
    assert layout[("a", 1)] == pytest.approx(-0.4)
    assert layout[("b", 0)] == pytest.approx(1.0)


def _fd_gradient(G, x):
    v = G.free_vector()
    out = np.empty_like(v)
    for i in range(v.size):
        h = 1e-6 * max(1.0, abs(v[i]))
        up, dn = v.copy(), v.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (G.with_free_vector(up).evaluate(x) - G.with_free_vector(dn).evaluate(x)) / (2 * h)
    return out


@pytest.mark.parametrize("family", FAMILIES)
def test_gradient_matches_finite_differences(family):
    rng = np.random.default_rng(hash(family) % 2**32)
    worst = 0.0
    for trial in range(25):
        expert = EXPERTS[trial % len(EXPERTS)]
        G = random_model(rng, family, expert)
        x = rng.uniform(-1, 1, 2)
        g = grad_regression(G, x).values
        fd = _fd_gradient(G, x)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))
    assert worst <= 1e-5


def test_symmetric_atoms_have_equal_expert_gradients():
    expert = ExpertFamily.ffn("sigmoid")
    G = SoftmaxMixingMeasure([0.3, 0.3, 0.0], [[1.0, -1.0], [1.0, -1.0], [0.0, 0.0]],
                             [[0.5, 0.2, 0.1, 1.0], [0.5, 0.2, 0.1, 1.0], [1, 1, 1, 1]], expert)
    grad = grad_regression(G, [0.3, 0.8])
    by_atom = {}
    for slot, v in zip(grad.layout, grad.values):
        if slot.field in ("a", "b", "c"):
            by_atom.setdefault(slot.atom, []).append(v)
    assert np.allclose(by_atom[0], by_atom[1])


def test_pinned_parameters_are_not_free(rng):
    G = random_softmax(rng, ExpertFamily.linear(), k=3, d=2)
    assert G.n_free == 3 * (1 + 2 + 3) - 3
    slots = {(s.atom, s.field) for s in G.layout}
    assert (2, "beta") not in slots and (2, "omega") not in slots


def test_layout_order_and_roundtrip(rng):
    G = random_dense(rng, ExpertFamily.ffn("gelu"), k=2)
    fields = [s.field for s in G.layout]
    assert fields[:6] == ["beta", "omega", "omega", "a", "a", "b"]
    assert fields[-1] == "tau"
    gv = grad_regression(G, [0.1, 0.2])
    back = GradientVector.from_dict(gv.as_dict(), gv.layout)
    assert np.array_equal(back.values, gv.values) and back.layout == gv.layout


# -- serialization


@pytest.mark.parametrize("family", FAMILIES)
def test_json_roundtrip_is_byte_stable(family, rng):
    G = random_model(rng, family, ExpertFamily.ffn("poly2"))
    text = G.to_json()
    back = measure_from_json(text)
    assert back.to_json() == text
    X = rng.uniform(-1, 1, (10, 2))
    assert np.array_equal(back.evaluate(X), G.evaluate(X))
    obj = json.loads(text)
    assert obj["family"] in ("softmax", "dense_to_sparse", "hierarchical")


def test_router_parse():
    assert Router.parse("linear").kind == "linear"
    assert Router.parse("sigmoid").activation == Activation("sigmoid")
