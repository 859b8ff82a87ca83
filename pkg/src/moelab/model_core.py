"""Parameter containers and regression functions for softmax-gated mixtures of experts.

Three model families are supported:

* ``SoftmaxMixingMeasure``      f_G(x) = sum_i softmax(omega_i.x + beta_i) E(x, eta_i)
* ``DenseToSparseMixingMeasure`` g_G(x) = sum_i softmax((pi(x, omega_i) + beta_i) / tau) E(x, eta_i)
* ``HierarchicalMixingMeasure``  two nested softmax gates over groups of experts

Every evaluation routine accepts a single point of shape ``(d,)`` or a batch of shape
``(n, d)``. Parameter Jacobians are analytic.

Free-parameter layout: atoms in declaration order; inside an atom the gate offset, the
gate vector coordinates, then the expert fields (``a`` coordinates, ``b``, ``c``). The
temperature of the dense-to-sparse family comes last. Pinned gating parameters (the last
atom's offset and gate vector) are excluded.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence, Union

import numpy as np
from scipy.special import erf, expit

NORM_EPS = 1e-12
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class InvalidInputError(ValueError):
    """Non-finite or malformed numeric input."""


class InvalidParameterError(ValueError):
    """Parameters that violate a model invariant (e.g. non-positive temperature)."""


# ---------------------------------------------------------------------------
# activations and experts


@dataclass(frozen=True)
class Activation:
    name: str
    power: int = 1

    def __post_init__(self):
        if self.name not in ("sigmoid", "tanh", "gelu", "poly"):
            raise ValueError(f"unknown activation {self.name!r}")
        if self.name == "poly" and self.power < 1:
            raise ValueError("poly activation needs a positive integer power")

    @classmethod
    def parse(cls, text: str) -> "Activation":
        """Parse ``sigmoid``, ``tanh``, ``gelu`` or ``poly<p>`` (e.g. ``poly2``)."""
        if text.startswith("poly"):
            return cls("poly", int(text[4:] or 1))
        return cls(text)

    @property
    def label(self) -> str:
        return f"poly{self.power}" if self.name == "poly" else self.name

    def value(self, z):
        if self.name == "sigmoid":
            return expit(z)
        if self.name == "tanh":
            return np.tanh(z)
        if self.name == "gelu":
            return z * 0.5 * (1.0 + erf(z / _SQRT2))
        return z**self.power

    def deriv(self, z):
        if self.name == "sigmoid":
            s = expit(z)
            return s * (1.0 - s)
        if self.name == "tanh":
            return 1.0 - np.tanh(z) ** 2
        if self.name == "gelu":
            return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        if self.power == 1:
            return np.ones_like(z)
        return self.power * z ** (self.power - 1)


@dataclass(frozen=True)
class ExpertFamily:
    """Expert function family: ``linear`` (a.x + b) or ``ffn`` (c * act(a.x/|x| + b))."""

    kind: str
    activation: Activation | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "ffn"):
            raise ValueError(f"unknown expert kind {self.kind!r}")
        if self.kind == "ffn" and self.activation is None:
            raise ValueError("ffn experts need an activation")
        if self.kind == "linear" and self.activation is not None:
            raise ValueError("linear experts take no activation")

    @classmethod
    def linear(cls) -> "ExpertFamily":
        return cls("linear")

    @classmethod
    def ffn(cls, activation: str | Activation = "sigmoid") -> "ExpertFamily":
        if isinstance(activation, str):
            activation = Activation.parse(activation)
        return cls("ffn", activation)

    @property
    def label(self) -> str:
        return "linear" if self.kind == "linear" else f"ffn-{self.activation.label}"

    def q(self, d: int) -> int:
        """Expert parameter dimension: d+1 for linear, d+2 for ffn."""
        return d + 1 if self.kind == "linear" else d + 2

    def field_names(self, d: int) -> list[tuple[str, int]]:
        names = [("a", u) for u in range(d)] + [("b", 0)]
        if self.kind == "ffn":
            names.append(("c", 0))
        return names

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.activation is not None:
            out["activation"] = self.activation.label
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ExpertFamily":
        if obj["kind"] == "linear":
            return cls.linear()
        return cls.ffn(obj["activation"])

    # -- batched evaluation; X is (n, d), etas is (k, q); results are (n, k[, q])

    def evaluate(self, X: np.ndarray, etas: np.ndarray) -> np.ndarray:
        d = X.shape[1]
        A, B = etas[:, :d], etas[:, d]
        if self.kind == "linear":
            return X @ A.T + B
        Z = normalize_inputs(X) @ A.T + B
        return etas[:, d + 1] * self.activation.value(Z)

    def jacobian(self, X: np.ndarray, etas: np.ndarray) -> np.ndarray:
        """Partial derivatives of every expert output with respect to its own eta."""
        n, d = X.shape
        k = etas.shape[0]
        out = np.empty((n, k, self.q(d)))
        if self.kind == "linear":
            out[:, :, :d] = X[:, None, :]
            out[:, :, d] = 1.0
            return out
        U = normalize_inputs(X)
        A, B, C = etas[:, :d], etas[:, d], etas[:, d + 1]
        Z = U @ A.T + B
        dsig = C * self.activation.deriv(Z)
        out[:, :, :d] = dsig[:, :, None] * U[:, None, :]
        out[:, :, d] = dsig
        out[:, :, d + 1] = self.activation.value(Z)
        return out


def normalize_inputs(X: np.ndarray) -> np.ndarray:
    """Row-wise x/|x|, with rows of norm below 1e-12 mapped to zero."""
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    return np.where(norms < NORM_EPS, 0.0, X / safe)


@dataclass(frozen=True, eq=False)
class ExpertSpec:
    """A single expert: its family plus the parameter vector eta = (a, b[, c])."""

    family: ExpertFamily
    eta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta", _frozen(self.eta, ndim=1))

    @classmethod
    def linear(cls, a, b) -> "ExpertSpec":
        return cls(ExpertFamily.linear(), np.r_[np.asarray(a, float), b])

    @classmethod
    def ffn(cls, a, b, c, activation: str = "sigmoid") -> "ExpertSpec":
        return cls(ExpertFamily.ffn(activation), np.r_[np.asarray(a, float), b, c])

    @property
    def d(self) -> int:
        return self.eta.size - (1 if self.family.kind == "linear" else 2)

    @property
    def a(self) -> np.ndarray:
        return self.eta[: self.d]

    @property
    def b(self) -> float:
        return float(self.eta[self.d])

    @property
    def c(self) -> float | None:
        return float(self.eta[self.d + 1]) if self.family.kind == "ffn" else None


def eval_expert(expert: ExpertSpec, x) -> Union[float, np.ndarray]:
    X, single = _as_batch(x, expert.d)
    out = expert.family.evaluate(X, expert.eta[None, :])[:, 0]
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# routers


@dataclass(frozen=True)
class Router:
    """Gate score function: ``linear`` pi = omega.x, or ``activated`` pi = act(omega.x)."""

    kind: str = "linear"
    activation: Activation | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "activated"):
            raise ValueError(f"unknown router kind {self.kind!r}")
        if (self.kind == "activated") != (self.activation is not None):
            raise ValueError("activated routers need an activation, linear routers none")

    @classmethod
    def activated(cls, activation: str | Activation) -> "Router":
        if isinstance(activation, str):
            activation = Activation.parse(activation)
        return cls("activated", activation)

    @property
    def label(self) -> str:
        return "linear" if self.kind == "linear" else self.activation.label

    @classmethod
    def parse(cls, text: str) -> "Router":
        return cls() if text == "linear" else cls.activated(text)

    def scores(self, lin: np.ndarray) -> np.ndarray:
        return lin if self.kind == "linear" else self.activation.value(lin)

    def score_deriv(self, lin: np.ndarray) -> np.ndarray:
        return np.ones_like(lin) if self.kind == "linear" else self.activation.deriv(lin)


# ---------------------------------------------------------------------------
# softmax


def softmax_weights(scores) -> np.ndarray:
    """Softmax along the last axis, with max subtraction."""
    s = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("softmax scores must be finite")
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# parameter layout


class ParamSlot(NamedTuple):
    atom: object  # int, or (group, inner) for hierarchical inner atoms, or None for tau
    field: str
    coord: int


@dataclass(frozen=True)
class GradientVector:
    values: np.ndarray
    layout: tuple[ParamSlot, ...]

    def __post_init__(self):
        if len(self.values) != len(self.layout):
            raise ValueError("gradient length does not match its layout")

    def as_dict(self) -> dict[ParamSlot, float]:
        return dict(zip(self.layout, map(float, self.values)))

    @classmethod
    def from_dict(cls, mapping: dict, layout: Sequence[ParamSlot]) -> "GradientVector":
        return cls(np.array([mapping[s] for s in layout]), tuple(layout))


def _frozen(arr, ndim: int) -> np.ndarray:
    out = np.array(arr, dtype=float)
    if out.ndim != ndim:
        raise InvalidParameterError(f"expected a {ndim}-d array, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InvalidParameterError("parameters must be finite")
    out.setflags(write=False)
    return out


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != d:
        raise InvalidInputError(f"input dimension {X.shape[1]} does not match model dimension {d}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("inputs must be finite")
    return X, single


def _expert_json(family: ExpertFamily, eta: np.ndarray, d: int) -> dict:
    out = {"a": [float(v) for v in eta[:d]], "b": float(eta[d])}
    if family.kind == "ffn":
        out["c"] = float(eta[d + 1])
    return out


def _expert_eta(obj: dict, family: ExpertFamily) -> list[float]:
    eta = list(obj["a"]) + [obj["b"]]
    if family.kind == "ffn":
        eta.append(obj["c"])
    return eta


class _MeasureBase:
    """Shared flatten/unflatten machinery. Subclasses provide ``_full_vector``,
    ``_full_layout``, ``_free_mask`` and ``_from_full``."""

    @property
    def layout(self) -> tuple[ParamSlot, ...]:
        full = self._full_layout()
        return tuple(s for s, keep in zip(full, self._free_mask()) if keep)

    def free_vector(self) -> np.ndarray:
        return self._full_vector()[self._free_mask()]

    def with_free_vector(self, values) -> "_MeasureBase":
        full = self._full_vector().copy()
        mask = self._free_mask()
        values = np.asarray(values, dtype=float)
        if values.shape != (mask.sum(),):
            raise InvalidParameterError(f"expected {mask.sum()} free parameters, got {values.shape}")
        full[mask] = values
        return self._from_full(full)

    @property
    def n_free(self) -> int:
        return int(self._free_mask().sum())

    def evaluate(self, x):
        X, single = _as_batch(x, self.d)
        out = self._evaluate(X)
        return float(out[0]) if single else out

    def jacobian(self, X) -> np.ndarray:
        """(n, n_free) matrix of partial derivatives of the regression output."""
        X, _ = _as_batch(X, self.d)
        return self._full_jacobian(X)[:, self._free_mask()]

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def _full_jacobian(self, X):  # pragma: no cover - overridden
        raise NotImplementedError


# ---------------------------------------------------------------------------
# softmax gating MoE


@dataclass(frozen=True, eq=False)
class SoftmaxMixingMeasure(_MeasureBase):
    betas: np.ndarray
    omegas: np.ndarray
    etas: np.ndarray
    expert: ExpertFamily
    pinned_last: bool = True

    family_name = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "betas", _frozen(self.betas, 1))
        object.__setattr__(self, "omegas", _frozen(self.omegas, 2))
        object.__setattr__(self, "etas", _frozen(self.etas, 2))
        k = self.betas.size
        if k == 0:
            raise InvalidParameterError("a mixing measure needs at least one atom")
        if self.omegas.shape[0] != k or self.etas.shape[0] != k:
            raise InvalidParameterError("atom counts disagree across fields")
        if self.etas.shape[1] != self.expert.q(self.d):
            raise InvalidParameterError("expert parameter width does not match the family")
        if self.pinned_last and (self.betas[-1] != 0.0 or np.any(self.omegas[-1] != 0.0)):
            raise InvalidParameterError("pinned last atom must have zero gating parameters")

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple[float, Sequence[float], ExpertSpec]], pinned_last: bool = True):
        betas = [a[0] for a in atoms]
        omegas = [list(a[1]) for a in atoms]
        etas = [a[2].eta for a in atoms]
        return cls(np.array(betas), np.array(omegas), np.array(etas), atoms[0][2].family, pinned_last)

    @property
    def k(self) -> int:
        return self.betas.size

    @property
    def d(self) -> int:
        return self.omegas.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """exp(beta_i), the atom masses of the mixing measure."""
        return np.exp(self.betas)

    def atoms(self) -> Iterator[tuple[float, np.ndarray, ExpertSpec]]:
        for i in range(self.k):
            yield float(self.betas[i]), self.omegas[i], ExpertSpec(self.expert, self.etas[i])

    def replace(self, **changes) -> "SoftmaxMixingMeasure":
        fields = dict(betas=self.betas, omegas=self.omegas, etas=self.etas, expert=self.expert,
                      pinned_last=self.pinned_last)
        fields.update(changes)
        return type(self)(**fields)

    def permuted(self, order) -> "SoftmaxMixingMeasure":
        order = list(order)
        pinned = self.pinned_last and order[-1] == self.k - 1
        return self.replace(betas=self.betas[order], omegas=self.omegas[order], etas=self.etas[order],
                            pinned_last=pinned)

    def _gate_scores(self, X):
        return X @ self.omegas.T + self.betas

    def _evaluate(self, X):
        w = softmax_weights(self._gate_scores(X))
        return np.sum(w * self.expert.evaluate(X, self.etas), axis=1)

    def _block(self) -> int:
        return 1 + self.d + self.etas.shape[1]

    def _full_vector(self):
        return np.hstack([self.betas[:, None], self.omegas, self.etas]).ravel()

    def _full_layout(self):
        slots = []
        names = self.expert.field_names(self.d)
        for i in range(self.k):
            slots.append(ParamSlot(i, "beta", 0))
            slots.extend(ParamSlot(i, "omega", u) for u in range(self.d))
            slots.extend(ParamSlot(i, f, u) for f, u in names)
        return slots

    def _free_mask(self):
        mask = np.ones(self.k * self._block(), dtype=bool)
        if self.pinned_last:
            start = (self.k - 1) * self._block()
            mask[start : start + 1 + self.d] = False
        return mask

    def _from_full(self, full):
        M = full.reshape(self.k, self._block())
        return self.replace(betas=M[:, 0], omegas=M[:, 1 : 1 + self.d], etas=M[:, 1 + self.d :])

    def _full_jacobian(self, X):
        n = X.shape[0]
        w = softmax_weights(self._gate_scores(X))
        E = self.expert.evaluate(X, self.etas)
        f = np.sum(w * E, axis=1, keepdims=True)
        g = w * (E - f)
        J = np.empty((n, self.k, self._block()))
        J[:, :, 0] = g
        J[:, :, 1 : 1 + self.d] = g[:, :, None] * X[:, None, :]
        J[:, :, 1 + self.d :] = w[:, :, None] * self.expert.jacobian(X, self.etas)
        return J.reshape(n, -1)

    def to_dict(self) -> dict:
        return {
            "family": self.family_name,
            "expert": self.expert.to_json(),
            "pinned_last": self.pinned_last,
            "betas": [float(b) for b in self.betas],
            "omegas": [[float(v) for v in row] for row in self.omegas],
            "experts": [_expert_json(self.expert, e, self.d) for e in self.etas],
        }


# ---------------------------------------------------------------------------
# dense-to-sparse gating MoE


@dataclass(frozen=True, eq=False)
class DenseToSparseMixingMeasure(SoftmaxMixingMeasure):
    tau: float = 1.0
    router: Router = field(default_factory=Router)

    family_name = "dense_to_sparse"

    def __post_init__(self):
        super().__post_init__()
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise InvalidParameterError(f"temperature must be positive, got {self.tau}")
        object.__setattr__(self, "tau", float(self.tau))

    @classmethod
    def from_atoms(cls, atoms, tau: float = 1.0, router: Router | None = None, pinned_last: bool = True):
        base = SoftmaxMixingMeasure.from_atoms(atoms, pinned_last)
        return cls(base.betas, base.omegas, base.etas, base.expert, pinned_last, tau, router or Router())

    @property
    def scaled_weights(self) -> np.ndarray:
        """exp(beta_i / tau), the atom masses used by the dense-to-sparse losses."""
        return np.exp(self.betas / self.tau)

    def replace(self, **changes):
        fields = dict(betas=self.betas, omegas=self.omegas, etas=self.etas, expert=self.expert,
                      pinned_last=self.pinned_last, tau=self.tau, router=self.router)
        fields.update(changes)
        return type(self)(**fields)

    def _gate_scores(self, X):
        return (self.router.scores(X @ self.omegas.T) + self.betas) / self.tau

    def _full_vector(self):
        return np.r_[super()._full_vector(), self.tau]

    def _full_layout(self):
        return super()._full_layout() + [ParamSlot(None, "tau", 0)]

    def _free_mask(self):
        return np.r_[super()._free_mask(), True]

    def _from_full(self, full):
        out = super()._from_full(full[:-1])
        return out.replace(tau=full[-1])

    def _full_jacobian(self, X):
        n = X.shape[0]
        lin = X @ self.omegas.T
        s = (self.router.scores(lin) + self.betas) / self.tau
        w = softmax_weights(s)
        E = self.expert.evaluate(X, self.etas)
        f = np.sum(w * E, axis=1, keepdims=True)
        g = w * (E - f)
        J = np.empty((n, self.k, self._block()))
        J[:, :, 0] = g / self.tau
        J[:, :, 1 : 1 + self.d] = (g * self.router.score_deriv(lin) / self.tau)[:, :, None] * X[:, None, :]
        J[:, :, 1 + self.d :] = w[:, :, None] * self.expert.jacobian(X, self.etas)
        dtau = -np.sum(g * s, axis=1) / self.tau
        return np.hstack([J.reshape(n, -1), dtau[:, None]])

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["tau"] = self.tau
        out["router"] = self.router.label
        return out


# ---------------------------------------------------------------------------
# hierarchical MoE


@dataclass(frozen=True, eq=False)
class HierarchicalMixingMeasure(_MeasureBase):
    """Two-level MoE: ``betas``/``omegas`` gate the groups, ``nus``/``kappas`` gate
    the experts inside each group. Shapes: (K1,), (K1, d), (K1, K2), (K1, K2, d), (K1, K2, q)."""

    betas: np.ndarray
    omegas: np.ndarray
    nus: np.ndarray
    kappas: np.ndarray
    etas: np.ndarray
    expert: ExpertFamily
    pinned_last_outer: bool = True
    pinned_last_inner: bool = True

    family_name = "hierarchical"

    def __post_init__(self):
        for name, nd in (("betas", 1), ("omegas", 2), ("nus", 2), ("kappas", 3), ("etas", 3)):
            object.__setattr__(self, name, _frozen(getattr(self, name), nd))
        K1, K2 = self.nus.shape
        if K1 == 0 or K2 == 0:
            raise InvalidParameterError("hierarchical measures need at least one group and one expert")
        if self.betas.shape != (K1,) or self.omegas.shape[0] != K1:
            raise InvalidParameterError("group counts disagree across fields")
        if self.kappas.shape[:2] != (K1, K2) or self.etas.shape[:2] != (K1, K2):
            raise InvalidParameterError("inner atom counts disagree across fields")
        if self.kappas.shape[2] != self.d or self.etas.shape[2] != self.expert.q(self.d):
            raise InvalidParameterError("parameter widths do not match the family")
        if self.pinned_last_outer and (self.betas[-1] != 0 or np.any(self.omegas[-1] != 0)):
            raise InvalidParameterError("pinned last group must have zero gating parameters")
        if self.pinned_last_inner and (np.any(self.nus[:, -1] != 0) or np.any(self.kappas[:, -1] != 0)):
            raise InvalidParameterError("pinned last inner atoms must have zero gating parameters")

    @property
    def d(self) -> int:
        return self.omegas.shape[1]

    @property
    def n_groups(self) -> int:
        return self.betas.size

    @property
    def k_inner(self) -> int:
        return self.nus.shape[1]

    def replace(self, **changes) -> "HierarchicalMixingMeasure":
        fields = dict(betas=self.betas, omegas=self.omegas, nus=self.nus, kappas=self.kappas, etas=self.etas,
                      expert=self.expert, pinned_last_outer=self.pinned_last_outer,
                      pinned_last_inner=self.pinned_last_inner)
        fields.update(changes)
        return type(self)(**fields)

    def permuted_inner(self, group: int, order) -> "HierarchicalMixingMeasure":
        order = list(order)
        nus, kappas, etas = self.nus.copy(), self.kappas.copy(), self.etas.copy()
        nus[group], kappas[group], etas[group] = nus[group, order], kappas[group, order], etas[group, order]
        pinned = self.pinned_last_inner and order[-1] == self.k_inner - 1
        return self.replace(nus=nus, kappas=kappas, etas=etas, pinned_last_inner=pinned)

    def permuted_groups(self, order) -> "HierarchicalMixingMeasure":
        order = list(order)
        pinned = self.pinned_last_outer and order[-1] == self.n_groups - 1
        return self.replace(betas=self.betas[order], omegas=self.omegas[order], nus=self.nus[order],
                            kappas=self.kappas[order], etas=self.etas[order], pinned_last_outer=pinned)

    def _parts(self, X):
        K1, K2, q = self.etas.shape
        W = softmax_weights(X @ self.omegas.T + self.betas)  # (n, K1)
        S2 = np.einsum("nd,gjd->ngj", X, self.kappas) + self.nus  # (n, K1, K2)
        V = softmax_weights(S2)
        E = self.expert.evaluate(X, self.etas.reshape(K1 * K2, q)).reshape(-1, K1, K2)
        H = np.sum(V * E, axis=2)  # (n, K1)
        return W, V, E, H

    def _evaluate(self, X):
        W, _, _, H = self._parts(X)
        return np.sum(W * H, axis=1)

    def _group_block(self) -> int:
        return 1 + self.d + self.k_inner * self._inner_block()

    def _inner_block(self) -> int:
        return 1 + self.d + self.etas.shape[2]

    def _full_vector(self):
        K1 = self.n_groups
        inner = np.concatenate([self.nus[:, :, None], self.kappas, self.etas], axis=2).reshape(K1, -1)
        return np.hstack([self.betas[:, None], self.omegas, inner]).ravel()

    def _full_layout(self):
        names = self.expert.field_names(self.d)
        slots = []
        for g in range(self.n_groups):
            slots.append(ParamSlot(g, "beta", 0))
            slots.extend(ParamSlot(g, "omega", u) for u in range(self.d))
            for j in range(self.k_inner):
                slots.append(ParamSlot((g, j), "nu", 0))
                slots.extend(ParamSlot((g, j), "kappa", u) for u in range(self.d))
                slots.extend(ParamSlot((g, j), f, u) for f, u in names)
        return slots

    def _free_mask(self):
        gb, ib, d = self._group_block(), self._inner_block(), self.d
        mask = np.ones(self.n_groups * gb, dtype=bool)
        for g in range(self.n_groups):
            if self.pinned_last_outer and g == self.n_groups - 1:
                mask[g * gb : g * gb + 1 + d] = False
            if self.pinned_last_inner:
                start = g * gb + 1 + d + (self.k_inner - 1) * ib
                mask[start : start + 1 + d] = False
        return mask

    def _from_full(self, full):
        K1, K2, d = self.n_groups, self.k_inner, self.d
        M = full.reshape(K1, self._group_block())
        inner = M[:, 1 + d :].reshape(K1, K2, self._inner_block())
        return self.replace(betas=M[:, 0], omegas=M[:, 1 : 1 + d], nus=inner[:, :, 0],
                            kappas=inner[:, :, 1 : 1 + d], etas=inner[:, :, 1 + d :])

    def _full_jacobian(self, X):
        n, d = X.shape
        K1, K2, q = self.etas.shape
        W, V, E, H = self._parts(X)
        h = np.sum(W * H, axis=1, keepdims=True)
        g1 = W * (H - h)  # d h / d outer score
        g2 = W[:, :, None] * V * (E - H[:, :, None])  # d h / d inner score
        dE = self.expert.jacobian(X, self.etas.reshape(K1 * K2, q)).reshape(n, K1, K2, q)
        outer = np.concatenate([g1[:, :, None], g1[:, :, None] * X[:, None, :]], axis=2)
        inner = np.concatenate(
            [g2[..., None], g2[..., None] * X[:, None, None, :], (W[:, :, None] * V)[..., None] * dE], axis=3
        )
        return np.concatenate([outer, inner.reshape(n, K1, -1)], axis=2).reshape(n, -1)

    def to_dict(self) -> dict:
        groups = []
        for g in range(self.n_groups):
            groups.append({
                "beta": float(self.betas[g]),
                "omega": [float(v) for v in self.omegas[g]],
                "nus": [float(v) for v in self.nus[g]],
                "kappas": [[float(v) for v in row] for row in self.kappas[g]],
                "experts": [_expert_json(self.expert, e, self.d) for e in self.etas[g]],
            })
        return {
            "family": self.family_name,
            "expert": self.expert.to_json(),
            "pinned_last_outer": self.pinned_last_outer,
            "pinned_last_inner": self.pinned_last_inner,
            "groups": groups,
        }


MixingMeasure = Union[SoftmaxMixingMeasure, DenseToSparseMixingMeasure, HierarchicalMixingMeasure]


def measure_from_dict(obj: dict) -> MixingMeasure:
    expert = ExpertFamily.from_json(obj["expert"])
    kind = obj["family"]
    if kind in ("softmax", "dense_to_sparse"):
        etas = np.array([_expert_eta(e, expert) for e in obj["experts"]])
        args = (np.array(obj["betas"], float), np.array(obj["omegas"], float), etas, expert, obj["pinned_last"])
        if kind == "softmax":
            return SoftmaxMixingMeasure(*args)
        return DenseToSparseMixingMeasure(*args, tau=obj["tau"], router=Router.parse(obj["router"]))
    if kind == "hierarchical":
        groups = obj["groups"]
        return HierarchicalMixingMeasure(
            betas=np.array([g["beta"] for g in groups], float),
            omegas=np.array([g["omega"] for g in groups], float),
            nus=np.array([g["nus"] for g in groups], float),
            kappas=np.array([g["kappas"] for g in groups], float),
            etas=np.array([[_expert_eta(e, expert) for e in g["experts"]] for g in groups], float),
            expert=expert,
            pinned_last_outer=obj["pinned_last_outer"],
            pinned_last_inner=obj["pinned_last_inner"],
        )
    raise ValueError(f"unknown model family {kind!r}")


def measure_from_json(text: str) -> MixingMeasure:
    return measure_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# functional API


def eval_regression_softmax(G: SoftmaxMixingMeasure, x):
    return G.evaluate(x)


def eval_regression_dense_to_sparse(G: DenseToSparseMixingMeasure, x):
    return G.evaluate(x)


def eval_regression_hierarchical(G: HierarchicalMixingMeasure, x):
    return G.evaluate(x)


def eval_regression(G: MixingMeasure, x):
    return G.evaluate(x)


def grad_regression(model: MixingMeasure, x) -> GradientVector:
    """Analytic gradient of the regression output at a single point over the free parameters."""
    J = model.jacobian(np.atleast_2d(np.asarray(x, dtype=float)))
    return GradientVector(J[0], model.layout)
