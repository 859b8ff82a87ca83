"""Numerical audits of expert identifiability, parameter-interaction PDEs and the
adversarial mixing-measure sequences that defeat polynomial rates for linear experts.

Linear independence of a family of functions is tested by evaluating them at random
points of the input box and inspecting the singular values of the column-normalised
evaluation matrix. A pass is numerical evidence, not a proof.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data_gen import derive_seed, philox_stream
from .model_core import (
    DenseToSparseMixingMeasure,
    ExpertFamily,
    HierarchicalMixingMeasure,
    Router,
    SoftmaxMixingMeasure,
)


class EvaluationError(ValueError):
    """A function in a set produced a non-finite value."""


def parse_expert(text: str | ExpertFamily) -> ExpertFamily:
    """``linear`` or ``ffn-<activation>`` (``ffn-sigmoid``, ``ffn-poly2``, ...)."""
    if isinstance(text, ExpertFamily):
        return text
    if text == "linear":
        return ExpertFamily.linear()
    if text.startswith("ffn-"):
        return ExpertFamily.ffn(text[4:])
    raise ValueError(f"unknown expert {text!r}; use 'linear' or 'ffn-<activation>'")


def parse_router(text: str | Router | None) -> Router:
    if isinstance(text, Router):
        return text
    return Router() if text in (None, "linear") else Router.activated(text)


# ---------------------------------------------------------------------------
# function sets and the rank test


@dataclass
class FunctionSet:
    labels: list[str]
    funcs: list[Callable[[np.ndarray], np.ndarray]]
    d: int

    def __post_init__(self):
        if len(self.labels) != len(self.funcs):
            raise ValueError("labels and functions disagree in number")

    def __len__(self) -> int:
        return len(self.funcs)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        cols = []
        for label, f in zip(self.labels, self.funcs):
            v = np.broadcast_to(np.asarray(f(X), dtype=float), (X.shape[0],))
            if not np.all(np.isfinite(v)):
                raise EvaluationError(f"function {label!r} is not finite at some evaluation point")
            cols.append(v)
        return np.column_stack(cols)

    def rescaled(self, factors: Sequence[float]) -> "FunctionSet":
        funcs = [(lambda X, f=f, s=s: s * f(X)) for f, s in zip(self.funcs, factors)]
        return FunctionSet(list(self.labels), funcs, self.d)

    def extended(self, labels, funcs) -> "FunctionSet":
        return FunctionSet(self.labels + list(labels), self.funcs + list(funcs), self.d)


@dataclass
class RankVerdict:
    independent: bool
    sigma_min: float
    sigma_max: float
    num_points: int
    tolerance: float
    # coefficients of a (near) vanishing combination, keyed by label; None when independent
    null_combination: Optional[dict] = None

    @property
    def ratio(self) -> float:
        return self.sigma_min / self.sigma_max if self.sigma_max > 0 else 0.0

    @property
    def margin(self) -> float:
        """log10 distance of the singular-value ratio from the tolerance (positive = independent)."""
        return math.log10(max(self.ratio, 1e-300)) - math.log10(self.tolerance)

    def to_dict(self) -> dict:
        return {"independent": self.independent, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max,
                "ratio": self.ratio, "margin_log10": self.margin, "num_points": self.num_points,
                "tolerance": self.tolerance, "null_combination": self.null_combination}


def sample_box(n: int, d: int, seed: int, box=(-1.0, 1.0), tag: str = "points") -> np.ndarray:
    lo, hi = box
    return lo + (hi - lo) * philox_stream(derive_seed(seed, tag)).random((n, d))


def rank_test(fset: FunctionSet, num_points: Optional[int] = None, seed: int = 0, tolerance: float = 1e-6,
              box=(-1.0, 1.0)) -> RankVerdict:
    m = len(fset)
    if num_points is None:
        num_points = 4 * m
    if num_points < 2 * m:
        raise ValueError(f"need at least {2 * m} evaluation points for {m} functions")
    X = sample_box(num_points, fset.d, seed, box, "rank")
    M = fset.evaluate(X)
    norms = np.linalg.norm(M, axis=0)
    zero = norms == 0
    Mn = M / np.where(zero, 1.0, norms)
    _, s, Vt = np.linalg.svd(Mn, full_matrices=False)
    if np.any(zero):
        s = s.copy()
        s[-1] = 0.0
    sigma_max, sigma_min = float(s[0]), float(s[-1])
    independent = sigma_max > 0 and sigma_min / sigma_max > tolerance
    combo = None
    if not independent:
        if np.any(zero):
            combo = {fset.labels[i]: 1.0 for i in np.flatnonzero(zero)[:1]}
        else:
            v = Vt[-1] / norms
            v = v / v[np.argmax(np.abs(v))]
            combo = {fset.labels[i]: float(v[i]) for i in np.flatnonzero(np.abs(v) > 1e-6)}
    return RankVerdict(bool(independent), sigma_min, sigma_max, num_points, tolerance, combo)


# ---------------------------------------------------------------------------
# derivatives


def _fd_step(p: float) -> float:
    return 1e-4 * max(1.0, abs(p))


def expert_value(expert: ExpertFamily, eta: np.ndarray) -> Callable:
    return lambda X: expert.evaluate(X, eta[None, :])[:, 0]


def expert_first(expert: ExpertFamily, eta: np.ndarray, p: int) -> Callable:
    return lambda X: expert.jacobian(X, eta[None, :])[:, 0, p]


def expert_second(expert: ExpertFamily, eta: np.ndarray, p: int, p2: int) -> Callable:
    """Central difference in parameter p of the analytic derivative in parameter p2."""
    h = _fd_step(eta[p])
    up, dn = eta.copy(), eta.copy()
    up[p] += h
    dn[p] -= h

    def f(X):
        return (expert.jacobian(X, up[None, :])[:, 0, p2] - expert.jacobian(X, dn[None, :])[:, 0, p2]) / (2 * h)

    return f


def router_value(router: Router, omega: np.ndarray) -> Callable:
    return lambda X: router.scores(X @ omega)


def router_first(router: Router, omega: np.ndarray, u: int) -> Callable:
    return lambda X: router.score_deriv(X @ omega) * X[:, u]


def router_second(router: Router, omega: np.ndarray, u: int, v: int) -> Callable:
    h = _fd_step(omega[u])
    up, dn = omega.copy(), omega.copy()
    up[u] += h
    dn[u] -= h
    return lambda X: (router.score_deriv(X @ up) - router.score_deriv(X @ dn)) * X[:, v] / (2 * h)


def _param_names(expert: ExpertFamily, d: int) -> list[str]:
    return [f"{name}{u + 1}" if name == "a" else name for name, u in expert.field_names(d)]


class _Reduction:
    """Members of the sets that are redundant because of how FFN experts are parameterised.

    For c*act(a.x/|x| + b):
      * c enters linearly, so every derivative involving c is a multiple of a lower-order
        member of the set or vanishes;
      * the input direction has unit norm, so sum_u d2/da_u^2 = d2/db^2 (d2/db^2 is dropped);
      * the input direction is parallel to x, so x_v dE/da_u = x_u dE/da_v, and likewise
        dpi/domega_v * dE/da_u = dpi/domega_u * dE/da_v for any router of omega.x
        (only u <= v is kept).
    These relations hold for every activation, so removing them leaves exactly the
    question of whether the activation itself creates a dependence. ``none`` keeps the
    literal sets.
    """

    def __init__(self, expert: ExpertFamily, d: int, mode: str):
        if mode not in ("none", "structural"):
            raise ValueError(f"unknown reduction {mode!r}")
        self.active = mode == "structural" and expert.kind == "ffn"
        self.d = d

    def keep_param(self, p: int) -> bool:
        return not (self.active and p == self.d + 1)

    def keep_pair(self, p: int, p2: int) -> bool:
        return not (self.active and p == p2 == self.d)

    def keep_product(self, u: int, p: int) -> bool:
        """x_u (or dpi/domega_u) times dE/dparam_p."""
        return not (self.active and p < self.d and p < u)


def _monomials(d: int, degree: int) -> list[tuple[tuple[int, ...], str]]:
    out = [((), "")]
    if degree >= 1:
        out += [((u,), f"x{u + 1}") for u in range(d)]
    if degree >= 2:
        out += [((u, v), f"x{u + 1}*x{v + 1}") for u, v in itertools.combinations_with_replacement(range(d), 2)]
    return out


def _times_monomial(f, mono):
    if not mono:
        return f
    return lambda X: np.prod(X[:, list(mono)], axis=1) * f(X)


def _check_distinct(params: np.ndarray, what: str) -> None:
    for i, j in itertools.combinations(range(len(params)), 2):
        if np.array_equal(params[i], params[j]):
            raise ValueError(f"{what} {i} and {j} coincide; the set needs distinct parameters")


def build_strong_identifiability_set(expert, etas, d: int, reduce: str = "none") -> FunctionSet:
    """All x^nu * d^rho E(x, eta_j) with |nu| + |rho| <= 2 over the given distinct eta_j.

    ``reduce="structural"`` drops the parameterisation-induced redundancies described in
    ``_Reduction``; ``"none"`` builds the set literally.
    """
    expert = parse_expert(expert)
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    if etas.shape[1] != expert.q(d):
        raise ValueError(f"expert parameters need {expert.q(d)} entries, got {etas.shape[1]}")
    _check_distinct(etas, "expert parameters")
    names = _param_names(expert, d)
    red = _Reduction(expert, d, reduce)
    P = [p for p in range(expert.q(d)) if red.keep_param(p)]
    labels, funcs = [], []
    for j, eta in enumerate(etas):
        derivs = [((), "E", expert_value(expert, eta))]
        derivs += [((p,), f"dE/d{names[p]}", expert_first(expert, eta, p)) for p in P]
        derivs += [((p, p2), f"d2E/d{names[p]}d{names[p2]}", expert_second(expert, eta, p, p2))
                   for p, p2 in itertools.combinations_with_replacement(P, 2) if red.keep_pair(p, p2)]
        for rho, dlabel, f in derivs:
            for mono, mlabel in _monomials(d, 2 - len(rho)):
                if len(rho) == 1 and len(mono) == 1 and not red.keep_product(mono[0], rho[0]):
                    continue
                labels.append(f"{mlabel + '*' if mlabel else ''}{dlabel} @ eta_{j + 1}")
                funcs.append(_times_monomial(f, mono))
    return FunctionSet(labels, funcs, d)


def build_algebraic_independence_set(router, omegas, expert, etas, d: int, reduce: str = "none"
                                     ) -> FunctionSet:
    """Router-derivative times expert-derivative products for each (omega_j, eta_j) pair."""
    router = parse_router(router)
    expert = parse_expert(expert)
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    if omegas.shape != (etas.shape[0], d):
        raise ValueError("need one d-dimensional gating parameter per expert parameter")
    _check_distinct(omegas, "gating parameters")
    _check_distinct(etas, "expert parameters")
    names = _param_names(expert, d)
    red = _Reduction(expert, d, reduce)
    P = [p for p in range(expert.q(d)) if red.keep_param(p)]
    labels, funcs = [], []

    def add(label, *parts):
        labels.append(label)
        funcs.append(lambda X, parts=parts: np.prod([g(X) for g in parts], axis=0))

    for j, (om, eta) in enumerate(zip(omegas, etas)):
        at = f" @ atom_{j + 1}"
        E = expert_value(expert, eta)
        pi = router_value(router, om)
        dpi = [router_first(router, om, u) for u in range(d)]
        add("E" + at, E)
        add("pi*E" + at, pi, E)
        for u in range(d):
            add(f"dpi/dw{u + 1}*E" + at, dpi[u], E)
            add(f"pi*dpi/dw{u + 1}*E" + at, pi, dpi[u], E)
        for u, v in itertools.combinations_with_replacement(range(d), 2):
            add(f"dpi/dw{u + 1}*dpi/dw{v + 1}*E" + at, dpi[u], dpi[v], E)
            add(f"d2pi/dw{u + 1}dw{v + 1}*E" + at, router_second(router, om, u, v), E)
        for p in P:
            dE = expert_first(expert, eta, p)
            add(f"dE/d{names[p]}" + at, dE)
            add(f"pi*dE/d{names[p]}" + at, pi, dE)
            for u in range(d):
                if red.keep_product(u, p):
                    add(f"dpi/dw{u + 1}*dE/d{names[p]}" + at, dpi[u], dE)
        for p, p2 in itertools.combinations_with_replacement(P, 2):
            if not red.keep_pair(p, p2):
                continue
            add(f"d2E/d{names[p]}d{names[p2]}" + at, expert_second(expert, eta, p, p2))
    return FunctionSet(labels, funcs, d)


# Audit parameters are spread widely: on the unit box a narrow draw leaves the activations
# nearly linear, and the sets become numerically (not exactly) degenerate.
AUDIT_A, AUDIT_B, AUDIT_OMEGA = 8.0, 3.0, 6.0


def random_expert_params(expert, k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    expert = parse_expert(expert)
    a = rng.uniform(-AUDIT_A, AUDIT_A, (k, d))
    b = rng.uniform(-AUDIT_B, AUDIT_B, (k, 1))
    if expert.kind == "linear":
        return np.hstack([a, b])
    c = rng.choice([-1.0, 1.0], (k, 1)) * rng.uniform(0.5, 2.0, (k, 1))
    return np.hstack([a, b, c])


def audit_strong_identifiability(expert, k: int = 2, d: int = 2, seed: int = 0, reduce: str = "structural",
                                 tolerance: float = 1e-6, num_points: Optional[int] = None) -> RankVerdict:
    """Rank test of the strong identifiability set at seeded random distinct parameters."""
    rng = philox_stream(derive_seed(seed, "strong-id", str(expert)))
    etas = random_expert_params(expert, k, d, rng)
    return rank_test(build_strong_identifiability_set(expert, etas, d, reduce), num_points, seed, tolerance)


def audit_algebraic_independence(router, expert, k: int = 2, d: int = 2, seed: int = 0,
                                 reduce: str = "structural", tolerance: float = 1e-6,
                                 num_points: Optional[int] = None) -> RankVerdict:
    rng = philox_stream(derive_seed(seed, "alg-ind", str(router), str(expert)))
    omegas = rng.uniform(-AUDIT_OMEGA, AUDIT_OMEGA, (k, d))
    etas = random_expert_params(expert, k, d, rng)
    fset = build_algebraic_independence_set(router, omegas, expert, etas, d, reduce)
    return rank_test(fset, num_points, seed, tolerance)


# ---------------------------------------------------------------------------
# parameter-interaction PDEs


def _expert_derivs(expert: ExpertFamily, eta: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    X = np.atleast_2d(x)
    return float(expert.evaluate(X, eta[None, :])[0, 0]), expert.jacobian(X, eta[None, :])[0, 0]


def _eta(a, b, c, expert: ExpertFamily) -> np.ndarray:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    parts = [a, [float(b)]]
    if expert.kind == "ffn":
        parts.append([1.0 if c is None else float(c)])
    return np.concatenate(parts)


def pde_residual_linear_expert(omega, a, b, x, expert=None, c=None) -> float:
    """|| d2F/domega db - dF/da || for F = exp(omega.x) E(x, (a, b[, c])).

    Zero for linear experts; pass an FFN ``expert`` to probe the violation regime.
    """
    expert = ExpertFamily.linear() if expert is None else parse_expert(expert)
    omega = np.asarray(omega, dtype=float)
    x = np.asarray(x, dtype=float)
    d = x.size
    eta = _eta(a, b, c, expert)
    _, dE = _expert_derivs(expert, eta, x)
    g = math.exp(float(omega @ x))
    lhs = x * g * dE[d]  # d/domega of exp(omega.x) dE/db
    rhs = g * dE[:d]
    return float(np.linalg.norm(lhs - rhs))


def pde_residual_temperature(omega, tau: float, eta, expert, x, router=None) -> float:
    """| dF/dtau + (1/tau) omega . dF/domega | for F = exp(pi(x, omega)/tau) E(x, eta).

    Zero for a linear router; an activated ``router`` breaks the identity.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    router = parse_router(router)
    expert = parse_expert(expert)
    omega = np.asarray(omega, dtype=float)
    x = np.asarray(x, dtype=float)
    E, _ = _expert_derivs(expert, np.asarray(eta, dtype=float), x)
    z = float(omega @ x)
    pi = float(router.scores(np.array(z)))
    F = math.exp(pi / tau) * E
    dF_dtau = -pi / tau**2 * F
    dF_domega = float(router.score_deriv(np.array(z))) * x / tau * F
    return abs(dF_dtau + float(omega @ dF_domega) / tau)


def pde_residual_hierarchical(omega, kappa, a, b, x, expert=None, c=None) -> tuple[float, float]:
    """(|| d2G/domega db - dG/da ||, || d2G/dkappa db - dG/da ||) for
    G = exp(omega.x) exp(kappa.x) E(x, (a, b[, c])). Both vanish for linear experts."""
    expert = ExpertFamily.linear() if expert is None else parse_expert(expert)
    x = np.asarray(x, dtype=float)
    d = x.size
    eta = _eta(a, b, c, expert)
    _, dE = _expert_derivs(expert, eta, x)
    g = math.exp(float(np.asarray(omega, float) @ x)) * math.exp(float(np.asarray(kappa, float) @ x))
    d_omega_b = x * g * dE[d]
    d_kappa_b = x * g * dE[d]
    d_a = g * dE[:d]
    return float(np.linalg.norm(d_omega_b - d_a)), float(np.linalg.norm(d_kappa_b - d_a))


# ---------------------------------------------------------------------------
# adversarial sequences


def _require_linear(truth):
    if truth.expert.kind != "linear":
        raise ValueError("this construction needs linear experts")


def adversarial_sequence_linear(truth: SoftmaxMixingMeasure, n: int, r: float = 1.0) -> SoftmaxMixingMeasure:
    """Split the first true atom into two half-weight copies whose biases sit at +-1/n, with
    each weight raised by 1/(2 n^(r+1)); all other atoms are copied."""
    if type(truth) is not SoftmaxMixingMeasure:
        raise TypeError("needs a softmax mixing measure")
    _require_linear(truth)
    if n < 1:
        raise ValueError("n must be >= 1")
    d = truth.d
    w = 0.5 * math.exp(truth.betas[0]) + 0.5 * n ** (-(r + 1))
    beta = math.log(w)
    e_up, e_dn = truth.etas[0].copy(), truth.etas[0].copy()
    e_up[d] += 1.0 / n
    e_dn[d] -= 1.0 / n
    betas = np.concatenate([[beta, beta], truth.betas[1:]])
    omegas = np.vstack([truth.omegas[:1], truth.omegas[:1], truth.omegas[1:]])
    etas = np.vstack([e_up, e_dn, truth.etas[1:]])
    pinned = truth.pinned_last and truth.k > 1
    return SoftmaxMixingMeasure(betas, omegas, etas, truth.expert, pinned)


def closed_form_linear(truth: SoftmaxMixingMeasure, n: int, r: float = 1.0) -> float:
    """L2,r between ``adversarial_sequence_linear(truth, n, r)`` and the truth."""
    eps = n ** (-(r + 1))
    return eps + (math.exp(truth.betas[0]) + eps) * n ** (-r)


def adversarial_sequence_temperature(truth: DenseToSparseMixingMeasure, n: int, r: float = 1.0,
                                     cell_sizes: Optional[Sequence[int]] = None) -> DenseToSparseMixingMeasure:
    """Shift every gate vector by (1/n) omega_j/tau and the temperature by 1/n, compensating the
    biases so each cell's total weight is unchanged; atom j is repeated ``cell_sizes[j]`` times.

    With a linear router the resulting gate is identical to the truth's. ``r`` only enters
    the matching closed form and is accepted for symmetry with the other constructions.
    """
    if type(truth) is not DenseToSparseMixingMeasure or truth.router.kind != "linear":
        raise TypeError("needs a dense-to-sparse mixing measure with a linear router")
    if n < 1:
        raise ValueError("n must be >= 1")
    sizes = [1] * truth.k if cell_sizes is None else [int(m) for m in cell_sizes]
    if len(sizes) != truth.k or min(sizes) < 1:
        raise ValueError("need one positive cell size per true atom")
    t = 1.0 / n
    tau = truth.tau + t
    betas, omegas, etas = [], [], []
    for j, m in enumerate(sizes):
        s = t * truth.omegas[j] / truth.tau
        beta = tau * (truth.betas[j] / truth.tau - math.log(m))
        for _ in range(m):
            betas.append(beta)
            omegas.append(truth.omegas[j] + s)
            etas.append(truth.etas[j])
    pinned = truth.pinned_last and sizes[-1] == 1
    return DenseToSparseMixingMeasure(np.array(betas), np.array(omegas), np.array(etas), truth.expert, pinned,
                                      tau=tau, router=truth.router)


def closed_form_temperature(truth: DenseToSparseMixingMeasure, n: int, r: float = 1.0) -> float:
    """L3,r between ``adversarial_sequence_temperature(truth, n, r, cell_sizes)`` and the truth.

    Each cell's total weight equals exp(beta*_j/tau*) whatever its size, so the value does not
    depend on the cell sizes.
    """
    t = 1.0 / n
    total = 0.0
    for j in range(truth.k):
        s = t * np.linalg.norm(truth.omegas[j]) / truth.tau
        total += math.exp(truth.betas[j] / truth.tau) * (s**r + t**r)
    return total


def adversarial_sequence_hierarchical(truth: HierarchicalMixingMeasure, n: int, r: float = 1.0
                                      ) -> HierarchicalMixingMeasure:
    """In every group split the first inner atom into two copies with biases at +-1/n and
    inner weights exp(nu*)/2 + 1/(2 n^(r+1)); the outer level is copied."""
    if type(truth) is not HierarchicalMixingMeasure:
        raise TypeError("needs a hierarchical mixing measure")
    _require_linear(truth)
    if n < 1:
        raise ValueError("n must be >= 1")
    d = truth.d
    nus, kappas, etas = [], [], []
    for g in range(truth.n_groups):
        w = 0.5 * math.exp(truth.nus[g, 0]) + 0.5 * n ** (-(r + 1))
        e_up, e_dn = truth.etas[g, 0].copy(), truth.etas[g, 0].copy()
        e_up[d] += 1.0 / n
        e_dn[d] -= 1.0 / n
        nus.append(np.concatenate([[math.log(w)] * 2, truth.nus[g, 1:]]))
        kappas.append(np.vstack([truth.kappas[g, :1], truth.kappas[g, :1], truth.kappas[g, 1:]]))
        etas.append(np.vstack([e_up, e_dn, truth.etas[g, 1:]]))
    pinned_inner = truth.pinned_last_inner and truth.k_inner > 1
    return HierarchicalMixingMeasure(truth.betas.copy(), truth.omegas.copy(), np.array(nus), np.array(kappas),
                                     np.array(etas), truth.expert, truth.pinned_last_outer, pinned_inner)


def closed_form_hierarchical(truth: HierarchicalMixingMeasure, n: int, r: float = 1.0) -> float:
    """L6,r between ``adversarial_sequence_hierarchical(truth, n, r)`` and the truth."""
    eps = n ** (-(r + 1))
    outer = np.exp(truth.betas)
    return float(eps * outer.sum() + np.sum(outer * (np.exp(truth.nus[:, 0]) + eps)) * n ** (-r))


# ---------------------------------------------------------------------------
# L2 ratio probe


@dataclass
class ProbeRow:
    n: float
    distance: float
    loss: float
    ratio: Optional[float]  # None when the loss vanishes


@dataclass
class ProbeTable:
    rows: list[ProbeRow] = field(default_factory=list)

    def ratio(self, n) -> Optional[float]:
        for row in self.rows:
            if row.n == n:
                return row.ratio
        raise KeyError(n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "distance", "loss", "ratio"])
        for row in self.rows:
            writer.writerow([repr(row.n), repr(row.distance), repr(row.loss),
                             "NA" if row.ratio is None else repr(row.ratio)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([row.__dict__ for row in self.rows])


def l2_distance(model, truth, X: np.ndarray, floor: float = 1e-12) -> float:
    """Monte Carlo L2(mu) distance between the regression functions of two measures.

    Distances below ``floor`` times the RMS size of the true regression function are
    indistinguishable from rounding in the evaluation and are reported as exactly zero.
    """
    f_true = truth.evaluate(X)
    dist = float(np.sqrt(np.mean((model.evaluate(X) - f_true) ** 2)))
    scale = float(np.sqrt(np.mean(f_true**2)))
    return 0.0 if dist <= floor * max(scale, 1e-300) else dist


def l2_ratio_probe(sequence: Callable, truth, loss: Callable, n_grid, mc_points: int = 100_000, seed: int = 0,
                   box=(-1.0, 1.0), floor: float = 1e-12) -> ProbeTable:
    """Tabulate ||f_{G_n} - f_truth||_{L2(mu)}, the loss, and their ratio along a sequence.

    ``sequence(n)`` returns the measure G_n and ``loss(G_n, truth)`` a float or LossReport.
    """
    if mc_points < 10_000:
        raise ValueError("the probe needs at least 10^4 Monte Carlo points")
    X = sample_box(mc_points, truth.d, seed, box, "l2-probe")
    table = ProbeTable()
    for n in n_grid:
        G = sequence(n)
        dist = l2_distance(G, truth, X, floor)
        val = loss(G, truth)
        val = float(getattr(val, "value", val))
        table.rows.append(ProbeRow(n, dist, val, None if val == 0 else dist / val))
    return table


# ---------------------------------------------------------------------------
# batteries used by the command line and the acceptance suite


PDE_VIOLATION_FLOOR = 1e-3


def _pde_draw(rng: np.random.Generator, d: int) -> dict:
    # moderate draws: large |a| saturates the FFN and pushes every residual toward zero
    return dict(omega=rng.uniform(-1, 1, d), kappa=rng.uniform(-1, 1, d), a=rng.uniform(-1, 1, d),
                b=float(rng.uniform(-0.5, 0.5)), c=float(rng.uniform(1, 2)), tau=float(rng.uniform(0.5, 2)),
                x=rng.uniform(-1, 1, d))


def pde_survey(num_points: int = 100, d: int = 2, seed: int = 0, ffn: str = "ffn-sigmoid",
               router: str = "sigmoid") -> dict:
    """Evaluate all three interaction identities at random probe points.

    ``identity`` holds the largest residual where the identity should hold exactly;
    ``violation`` counts points where the broken variant (FFN expert, activated router)
    reaches ``PDE_VIOLATION_FLOOR``.
    """
    rng = philox_stream(derive_seed(seed, "pde-survey"))
    ident = {"linear_expert": 0.0, "temperature": 0.0, "hierarchical": 0.0}
    viol = {"linear_expert": 0, "temperature": 0, "hierarchical": 0}
    tanh_ffn = parse_expert("ffn-tanh")
    for _ in range(num_points):
        p = _pde_draw(rng, d)
        eta = np.concatenate([p["a"], [p["b"], p["c"]]])
        ident["linear_expert"] = max(ident["linear_expert"], pde_residual_linear_expert(p["omega"], p["a"], p["b"], p["x"]))
        ident["temperature"] = max(ident["temperature"],
                                   pde_residual_temperature(p["omega"], p["tau"], eta, tanh_ffn, p["x"]))
        ident["hierarchical"] = max(ident["hierarchical"],
                                    *pde_residual_hierarchical(p["omega"], p["kappa"], p["a"], p["b"], p["x"]))
        viol["linear_expert"] += pde_residual_linear_expert(p["omega"], p["a"], p["b"], p["x"], expert=ffn,
                                                            c=p["c"]) >= PDE_VIOLATION_FLOOR
        viol["temperature"] += pde_residual_temperature(p["omega"], p["tau"], eta, tanh_ffn, p["x"],
                                                        router=router) >= PDE_VIOLATION_FLOOR
        viol["hierarchical"] += min(pde_residual_hierarchical(p["omega"], p["kappa"], p["a"], p["b"], p["x"],
                                                              expert=ffn, c=p["c"])) >= PDE_VIOLATION_FLOOR
    return {"num_points": num_points, "identity": ident, "violation": {k: int(v) for k, v in viol.items()},
            "violation_floor": PDE_VIOLATION_FLOOR}


def counterexample_tables(softmax_truth: SoftmaxMixingMeasure, dense_truth: DenseToSparseMixingMeasure,
                          hier_truth: HierarchicalMixingMeasure, n_grid=(10, 100, 1000), r: float = 1.0,
                          mc_points: int = 100_000, seed: int = 0) -> dict[str, ProbeTable]:
    """Ratio probes along the three adversarial sequences (linear experts, temperature, hierarchical)."""
    from .voronoi import loss_L2r, loss_L3r, loss_L6r

    return {
        "linear_expert": l2_ratio_probe(lambda n: adversarial_sequence_linear(softmax_truth, n, r), softmax_truth,
                                        lambda G, T: loss_L2r(G, T, r), n_grid, mc_points, seed),
        "temperature": l2_ratio_probe(lambda n: adversarial_sequence_temperature(dense_truth, n, r), dense_truth,
                                      lambda G, T: loss_L3r(G, T, r), n_grid, mc_points, seed),
        "hierarchical": l2_ratio_probe(lambda n: adversarial_sequence_hierarchical(hier_truth, n, r), hier_truth,
                                       lambda G, T: loss_L6r(G, T, r), n_grid, mc_points, seed),
    }
