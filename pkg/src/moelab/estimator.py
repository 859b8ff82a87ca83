"""Least-squares fitting of mixing measures inside a compact parameter box.

The estimator is the global minimiser of sum_i (Y_i - regression_G(X_i))^2; it is
approximated by multi-start projected optimisation. Two local solvers are available:
a projected Levenberg-Marquardt method (default; the residual Jacobian is analytic and
small) and a projected Adam with an accept-if-decrease safeguard. Both only ever
accept iterates that lower the objective.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .data_gen import Dataset, derive_seed, philox_stream
from .model_core import (
    DenseToSparseMixingMeasure,
    ExpertFamily,
    GradientVector,
    HierarchicalMixingMeasure,
    MixingMeasure,
    Router,
    SoftmaxMixingMeasure,
    measure_from_dict,
)


class FitFailure(RuntimeError):
    """Every restart diverged."""


@dataclass(frozen=True)
class ThetaBox:
    """Per-field bounds of the compact parameter space."""

    beta: tuple[float, float] = (-5.0, 5.0)
    omega: tuple[float, float] = (-5.0, 5.0)
    a: tuple[float, float] = (-5.0, 5.0)
    b: tuple[float, float] = (-5.0, 5.0)
    c: tuple[float, float] = (-5.0, 5.0)
    nu: tuple[float, float] = (-5.0, 5.0)
    kappa: tuple[float, float] = (-5.0, 5.0)
    tau: tuple[float, float] = (0.1, 10.0)

    def __post_init__(self):
        for name, (lo, hi) in asdict(self).items():
            if not lo < hi:
                raise ValueError(f"empty bound for {name}: [{lo}, {hi}]")
            object.__setattr__(self, name, (float(lo), float(hi)))

    def bounds_for(self, layout) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([getattr(self, slot.field)[0] for slot in layout])
        hi = np.array([getattr(self, slot.field)[1] for slot in layout])
        return lo, hi

    def contains(self, model: MixingMeasure, atol: float = 0.0) -> bool:
        lo, hi = self.bounds_for(model.layout)
        v = model.free_vector()
        return bool(np.all(v >= lo - atol) and np.all(v <= hi + atol))

    def to_json(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "ThetaBox":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown theta_box keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in obj.items()})


@dataclass(frozen=True)
class ModelFamily:
    """Shape of the model class being fitted.

    ``k`` is the atom budget; for the hierarchical family it is the inner budget per group
    and ``n_groups`` the (known) number of groups.
    """

    kind: str
    expert: ExpertFamily
    d: int
    k: int
    n_groups: int = 1
    router: Router = field(default_factory=Router)

    def __post_init__(self):
        if self.kind not in ("softmax", "dense_to_sparse", "hierarchical"):
            raise ValueError(f"unknown model family {self.kind!r}")
        if self.k < 1 or self.n_groups < 1:
            raise ValueError("atom budgets must be positive")

    @classmethod
    def like(cls, truth: MixingMeasure, k: int) -> "ModelFamily":
        if isinstance(truth, HierarchicalMixingMeasure):
            return cls("hierarchical", truth.expert, truth.d, k, n_groups=truth.n_groups)
        if isinstance(truth, DenseToSparseMixingMeasure):
            return cls("dense_to_sparse", truth.expert, truth.d, k, router=truth.router)
        return cls("softmax", truth.expert, truth.d, k)

    def matches(self, model: MixingMeasure) -> bool:
        return model.family_name == self.kind and model.d == self.d and model.expert == self.expert

    def random_measure(self, rng: np.random.Generator, box: ThetaBox) -> MixingMeasure:
        """Uniform draw from the box; the last atom (and inner atom) is pinned."""
        template = self.zero_measure()
        lo, hi = box.bounds_for(template.layout)
        return template.with_free_vector(lo + (hi - lo) * rng.random(lo.size))

    def zero_measure(self) -> MixingMeasure:
        q, d, k = self.expert.q(self.d), self.d, self.k
        if self.kind == "hierarchical":
            K1 = self.n_groups
            return HierarchicalMixingMeasure(np.zeros(K1), np.zeros((K1, d)), np.zeros((K1, k)),
                                             np.zeros((K1, k, d)), np.zeros((K1, k, q)), self.expert)
        args = (np.zeros(k), np.zeros((k, d)), np.zeros((k, q)), self.expert, True)
        if self.kind == "dense_to_sparse":
            return DenseToSparseMixingMeasure(*args, tau=1.0, router=self.router)
        return SoftmaxMixingMeasure(*args)


@dataclass(frozen=True)
class FitConfig:
    k_fit: int
    restarts: int = 10
    max_iters: int = 5000
    grad_tol: float = 1e-8
    method: str = "lm"
    # relative objective decrease / relative step below which LM stops as converged
    ftol: float = 1e-12
    xtol: float = 1e-10
    learning_rate: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    theta_box: ThetaBox = field(default_factory=ThetaBox)
    init_mode: str = "mixed"
    warm_perturbation_scale: float = 0.1
    # the perturbation used is scale * n**(-exponent)
    warm_perturbation_exponent: float = 0.0
    # cold starts are first optimised on a subsample of this size (0 disables)
    screen_size: int = 0
    # number of screened cold starts polished on the full data
    polish_top: int = 2

    def __post_init__(self):
        if self.k_fit < 1 or self.restarts < 1:
            raise ValueError("k_fit and restarts must be positive")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.method not in ("lm", "adam"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.init_mode not in ("cold", "warm", "mixed"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if isinstance(self.theta_box, dict):
            object.__setattr__(self, "theta_box", ThetaBox.from_json(self.theta_box))

    def to_json(self) -> dict:
        out = asdict(self)
        out["theta_box"] = self.theta_box.to_json()
        out["adam_betas"] = list(self.adam_betas)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FitConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        obj = dict(obj)
        if "theta_box" in obj:
            obj["theta_box"] = ThetaBox.from_json(obj["theta_box"])
        if "adam_betas" in obj:
            obj["adam_betas"] = tuple(obj["adam_betas"])
        return cls(**obj)


@dataclass
class RestartRecord:
    index: int
    start: str  # "warm" or "cold"
    objective: float
    iterations: int
    converged: bool
    diverged: bool = False


@dataclass
class FitResult:
    fitted: MixingMeasure
    objective: float
    converged: bool
    iterations: int
    winner: int
    restarts: list[RestartRecord]

    @property
    def restart_objectives(self) -> list[float]:
        return [r.objective for r in self.restarts]

    @property
    def winner_start(self) -> str:
        return self.restarts[self.winner].start

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "converged": self.converged,
            "iterations": self.iterations,
            "winner": self.winner,
            "winner_start": self.winner_start,
            "restarts": [asdict(r) for r in self.restarts],
            "fitted": self.fitted.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "FitResult":
        return cls(measure_from_dict(obj["fitted"]), obj["objective"], obj["converged"], obj["iterations"],
                   obj["winner"], [RestartRecord(**r) for r in obj["restarts"]])


# ---------------------------------------------------------------------------
# objective, gradient, projection


def _check_compatible(model: MixingMeasure, dataset: Dataset) -> None:
    if model.d != dataset.d:
        raise ValueError(f"model dimension {model.d} does not match data dimension {dataset.d}")


def ls_objective(model: MixingMeasure, dataset: Dataset) -> float:
    _check_compatible(model, dataset)
    r = dataset.responses - model.evaluate(dataset.inputs)
    return float(r @ r)


def ls_gradient(model: MixingMeasure, dataset: Dataset) -> GradientVector:
    _check_compatible(model, dataset)
    r = dataset.responses - model.evaluate(dataset.inputs)
    return GradientVector(-2.0 * (model.jacobian(dataset.inputs).T @ r), model.layout)


def clip_to_box(vector: np.ndarray, layout, theta_box: ThetaBox) -> np.ndarray:
    """Clip a raw free-parameter vector; works for vectors that are not valid models yet (e.g. tau < 0)."""
    lo, hi = theta_box.bounds_for(layout)
    return np.clip(np.asarray(vector, dtype=float), lo, hi)


def project_to_box(model: MixingMeasure, theta_box: ThetaBox) -> MixingMeasure:
    """Clip every free parameter into the box; pinned gating parameters are left alone."""
    return model.with_free_vector(clip_to_box(model.free_vector(), model.layout, theta_box))


# ---------------------------------------------------------------------------
# starting points


def warm_start(truth: MixingMeasure, family: ModelFamily) -> MixingMeasure:
    """The truth, over-specified by splitting its first atom (of every group) into equal copies.

    Splitting keeps the regression function unchanged.
    """
    if isinstance(truth, HierarchicalMixingMeasure):
        K2 = truth.k_inner
        extra = family.k - K2
        if extra < 0 or family.n_groups != truth.n_groups:
            raise ValueError("warm start needs k_fit >= true inner count and matching group count")
        idx = [0] * (extra + 1) + list(range(1, K2))
        nus = truth.nus[:, idx].copy()
        nus[:, : extra + 1] -= math.log(extra + 1)
        if truth.pinned_last_inner:
            nus -= nus[:, -1:]  # only moves anything when the pinned atom itself was split
        return truth.replace(nus=nus, kappas=truth.kappas[:, idx], etas=truth.etas[:, idx])
    extra = family.k - truth.k
    if extra < 0:
        raise ValueError("warm start needs k_fit >= number of true atoms")
    idx = [0] * (extra + 1) + list(range(1, truth.k))
    betas = truth.betas[idx].copy()
    scale = truth.tau if isinstance(truth, DenseToSparseMixingMeasure) else 1.0
    betas[: extra + 1] -= scale * math.log(extra + 1)
    if truth.pinned_last:
        betas -= betas[-1]
    return truth.replace(betas=betas, omegas=truth.omegas[idx], etas=truth.etas[idx])


def perturb(model: MixingMeasure, scale: float, rng: np.random.Generator, box: ThetaBox) -> MixingMeasure:
    v = model.free_vector()
    return project_to_box(model.with_free_vector(v + scale * rng.standard_normal(v.size)), box)


# ---------------------------------------------------------------------------
# local solvers


@dataclass
class _LocalResult:
    model: MixingMeasure
    objective: float
    iterations: int
    converged: bool
    trace: list[float]


def _projected_grad_norm(x, g, lo, hi) -> float:
    return float(np.linalg.norm(x - np.clip(x - g, lo, hi)))


def levenberg_marquardt(model: MixingMeasure, X: np.ndarray, y: np.ndarray, box: ThetaBox,
                        config: FitConfig) -> _LocalResult:
    lo, hi = box.bounds_for(model.layout)
    x = np.clip(model.free_vector(), lo, hi)
    model = model.with_free_vector(x)
    r = y - model.evaluate(X)
    obj = float(r @ r)
    trace = [obj]
    if not np.isfinite(obj):
        return _LocalResult(model, obj, 0, False, trace)
    lam = 1e-3
    it = 0
    converged = False
    J = model.jacobian(X)
    while it < config.max_iters:
        g = -2.0 * (J.T @ r)
        if _projected_grad_norm(x, g, lo, hi) <= config.grad_tol:
            converged = True
            break
        A = J.T @ J
        rhs = J.T @ r
        diag = np.maximum(np.diag(A), 1e-12 * max(1.0, float(np.max(np.diag(A)))))
        it += 1
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), rhs)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = np.clip(x + step, lo, hi)
            cand = model.with_free_vector(x_new)
            r_new = y - cand.evaluate(X)
            obj_new = float(r_new @ r_new)
            if np.isfinite(obj_new) and obj_new < obj:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            converged = True  # no descent available at machine precision
            break
        rel_drop = (obj - obj_new) / max(obj, 1e-300)
        rel_step = np.linalg.norm(x_new - x) / (np.linalg.norm(x) + 1e-12)
        x, model, r, obj = x_new, cand, r_new, obj_new
        trace.append(obj)
        lam = max(lam / 3.0, 1e-12)
        if rel_drop <= config.ftol or rel_step <= config.xtol or obj == 0.0:
            converged = True
            break
        J = model.jacobian(X)
    return _LocalResult(model, obj, it, converged, trace)


def projected_adam(model: MixingMeasure, X: np.ndarray, y: np.ndarray, box: ThetaBox,
                   config: FitConfig) -> _LocalResult:
    lo, hi = box.bounds_for(model.layout)
    b1, b2 = config.adam_betas
    x = np.clip(model.free_vector(), lo, hi)
    model = model.with_free_vector(x)
    r = y - model.evaluate(X)
    obj = float(r @ r)
    trace = [obj]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    lr = config.learning_rate
    converged = False
    it = 0
    while it < config.max_iters and np.isfinite(obj):
        g = -2.0 * (model.jacobian(X).T @ r)
        if _projected_grad_norm(x, g, lo, hi) <= config.grad_tol:
            converged = True
            break
        it += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        direction = (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + 1e-12)
        step = lr
        for _ in range(30):
            x_new = np.clip(x - step * direction, lo, hi)
            cand = model.with_free_vector(x_new)
            r_new = y - cand.evaluate(X)
            obj_new = float(r_new @ r_new)
            if obj_new < obj:
                break
            step *= 0.5
        else:
            converged = True
            break
        x, model, r, obj = x_new, cand, r_new, obj_new
        trace.append(obj)
    return _LocalResult(model, obj, it, converged, trace)


_SOLVERS = {"lm": levenberg_marquardt, "adam": projected_adam}


# ---------------------------------------------------------------------------
# multi-start driver


def _starting_points(family: ModelFamily, config: FitConfig, n: int, seed: int,
                     truth: Optional[MixingMeasure]) -> list[tuple[str, MixingMeasure]]:
    starts = []
    box = config.theta_box
    n_warm = {"cold": 0, "warm": config.restarts, "mixed": 1}[config.init_mode]
    if n_warm and truth is None:
        raise ValueError(f"init_mode={config.init_mode!r} needs the truth for warm starts")
    scale = config.warm_perturbation_scale * n ** (-config.warm_perturbation_exponent)
    for i in range(config.restarts):
        rng = philox_stream(derive_seed(seed, "restart", i))
        if i < n_warm:
            base = project_to_box(warm_start(truth, family), box)
            # the first warm start keeps its exact initial point when the scale is zero
            starts.append(("warm", perturb(base, scale, rng, box) if scale > 0 else base))
        else:
            starts.append(("cold", family.random_measure(rng, box)))
    return starts


def fit(dataset: Dataset, family: ModelFamily, config: FitConfig, seed: int = 0,
        truth: Optional[MixingMeasure] = None) -> FitResult:
    """Multi-start least-squares fit; returns the restart with the smallest final objective.

    ``truth`` is only used to build warm starts (``init_mode`` ``warm`` or ``mixed``).
    """
    if dataset.n == 0:
        raise ValueError("cannot fit an empty dataset")
    if family.d != dataset.d:
        raise ValueError("family and dataset dimensions disagree")
    if family.k != config.k_fit:
        family = replace(family, k=config.k_fit)
    solver = _SOLVERS[config.method]
    box = config.theta_box
    X, y = dataset.inputs, dataset.responses
    starts = _starting_points(family, config, dataset.n, seed, truth)

    screened = {}
    if config.screen_size and dataset.n > config.screen_size:
        sub = philox_stream(derive_seed(seed, "screen")).choice(dataset.n, config.screen_size, replace=False)
        sub.sort()
        for i, (kind, start) in enumerate(starts):
            if kind == "cold":
                res = solver(start, X[sub], y[sub], box, config)
                screened[i] = res
        finite = [i for i in screened if np.isfinite(screened[i].objective)]
        keep = set(sorted(finite, key=lambda i: (screened[i].objective, i))[: config.polish_top])
    else:
        keep = set(range(len(starts)))

    records, models = [], []
    for i, (kind, start) in enumerate(starts):
        if i in screened and i not in keep:
            res = screened[i]
            model = res.model
            obj = float(np.sum((y - model.evaluate(X)) ** 2)) if np.isfinite(res.objective) else math.inf
            records.append(RestartRecord(i, kind, obj, res.iterations, False, not np.isfinite(obj)))
            models.append(model)
            continue
        init = screened[i].model if i in screened else start
        res = solver(init, X, y, box, config)
        iters = res.iterations + (screened[i].iterations if i in screened else 0)
        diverged = not np.isfinite(res.objective)
        records.append(RestartRecord(i, kind, res.objective if not diverged else math.inf, iters,
                                     res.converged and not diverged, diverged))
        models.append(res.model)

    alive = [r for r in records if not r.diverged]
    if not alive:
        raise FitFailure("all restarts diverged")
    best = min(alive, key=lambda r: (r.objective, r.index))
    return FitResult(models[best.index], best.objective, best.converged, best.iterations, best.index, records)
