import numpy as np
import pytest
from hypothesis import settings

from moelab.model_core import (
    DenseToSparseMixingMeasure,
    ExpertFamily,
    HierarchicalMixingMeasure,
    Router,
    SoftmaxMixingMeasure,
)

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

EXPERTS = [ExpertFamily.linear(), ExpertFamily.ffn("sigmoid"), ExpertFamily.ffn("tanh"), ExpertFamily.ffn("gelu")]


def random_etas(rng, expert, shape, d):
    a = rng.uniform(-2, 2, shape + (d,))
    b = rng.uniform(-1, 1, shape + (1,))
    if expert.kind == "linear":
        return np.concatenate([a, b], axis=-1)
    c = rng.uniform(0.5, 2, shape + (1,))
    return np.concatenate([a, b, c], axis=-1)


def random_softmax(rng, expert, k=3, d=2, pinned=True):
    betas = rng.uniform(-1, 1, k)
    omegas = rng.uniform(-2, 2, (k, d))
    if pinned:
        betas[-1] = 0.0
        omegas[-1] = 0.0
    return SoftmaxMixingMeasure(betas, omegas, random_etas(rng, expert, (k,), d), expert, pinned)


def random_dense(rng, expert, k=3, d=2, router=None):
    G = random_softmax(rng, expert, k, d)
    return DenseToSparseMixingMeasure(G.betas, G.omegas, G.etas, expert, True, tau=float(rng.uniform(0.5, 2)),
                                      router=router or Router())


def random_hier(rng, expert, K1=2, K2=2, d=2):
    betas = np.append(rng.uniform(-1, 1, K1 - 1), 0.0)
    omegas = rng.uniform(-2, 2, (K1, d))
    omegas[-1] = 0.0
    nus = rng.uniform(-1, 1, (K1, K2))
    nus[:, -1] = 0.0
    kappas = rng.uniform(-2, 2, (K1, K2, d))
    kappas[:, -1] = 0.0
    return HierarchicalMixingMeasure(betas, omegas, nus, kappas, random_etas(rng, expert, (K1, K2), d), expert)


def random_model(rng, family, expert):
    if family == "softmax":
        return random_softmax(rng, expert)
    if family == "linear_router":
        return random_dense(rng, expert)
    if family == "activated_router":
        return random_dense(rng, expert, router=Router.activated("tanh"))
    return random_hier(rng, expert)


FAMILIES = ["softmax", "linear_router", "activated_router", "hierarchical"]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one line per criterion, printed after the run

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record_criterion(number: int, passed: bool, text: str) -> None:
    ACCEPTANCE.setdefault(number, []).append((bool(passed), text))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entries = ACCEPTANCE[number]
        ok = all(p for p, _ in entries)
        head = entries[0][1] if len(entries) == 1 else f"{len(entries)} checks, {sum(p for p, _ in entries)} passed"
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {head}")
        if len(entries) > 1:
            for p, text in entries:
                terminalreporter.write_line(f"    {'pass' if p else 'FAIL'}  {text}")
