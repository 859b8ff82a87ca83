"""Voronoi cells of a fitted mixing measure and the Voronoi loss functionals L1..L6.

Fitted atoms are assigned to the nearest ground-truth atom (Euclidean norm on the
designated parameter block, ties to the lowest truth index). Each loss returns a
``LossReport`` whose ``terms`` add up to ``value``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .model_core import (
    DenseToSparseMixingMeasure,
    HierarchicalMixingMeasure,
    SoftmaxMixingMeasure,
)


class InvalidTruthError(ValueError):
    """Ground-truth atoms are not pairwise distinct."""


class FamilyMismatchError(TypeError):
    """A loss was asked to compare measures from the wrong model family."""


@dataclass(frozen=True)
class VoronoiPartition:
    cells: tuple[tuple[int, ...], ...]
    metric: str = "l2"

    def __len__(self) -> int:
        return len(self.cells)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.cells]

    def owner(self) -> dict[int, int]:
        return {i: j for j, cell in enumerate(self.cells) for i in cell}

    def to_dict(self) -> dict:
        return {"metric": self.metric, "cells": [list(c) for c in self.cells]}


@dataclass(frozen=True)
class HierarchicalPartition:
    outer: VoronoiPartition
    inner: dict  # fitted group index -> VoronoiPartition against its truth group

    def to_dict(self) -> dict:
        return {"outer": self.outer.to_dict(),
                "inner": {str(g): p.to_dict() for g, p in sorted(self.inner.items())}}


@dataclass
class LossReport:
    name: str
    terms: dict[str, float]
    partition: object
    r: float | None = None
    value: float = field(init=False)

    def __post_init__(self):
        self.terms = {k: float(v) for k, v in self.terms.items()}
        self.value = float(sum(self.terms.values()))

    def to_dict(self) -> dict:
        return {"loss_name": self.name, "r": self.r, "value": self.value, "terms": dict(self.terms),
                "partition": self.partition.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def csv_rows(self) -> list[list]:
        """One row per breakdown term plus a ``total`` row: loss_name, r, term, value."""
        r = "" if self.r is None else repr(float(self.r))
        rows = [[self.name, r, "total", repr(self.value)]]
        rows.extend([self.name, r, k, repr(v)] for k, v in self.terms.items())
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["loss_name", "r", "term", "value"])
        writer.writerows(self.csv_rows())
        return buf.getvalue()


# ---------------------------------------------------------------------------
# cells


def assign_cells(fitted_theta, truth_theta, metric: str = "l2") -> VoronoiPartition:
    """Nearest-truth assignment of fitted points (rows) to truth points (rows).

    One-dimensional inputs are read as lists of scalar parameters.
    """
    F = np.asarray(fitted_theta, dtype=float)
    T = np.asarray(truth_theta, dtype=float)
    F = F.reshape(F.shape[0], -1)
    T = T.reshape(T.shape[0], -1)
    if F.shape[1] != T.shape[1]:
        raise ValueError("fitted and true parameter blocks differ in size")
    for j in range(T.shape[0]):
        for l in range(j):
            if np.array_equal(T[j], T[l]):
                raise InvalidTruthError(f"ground-truth atoms {l} and {j} coincide")
    dist = np.linalg.norm(F[:, None, :] - T[None, :, :], axis=2)
    owner = np.argmin(dist, axis=1)  # first minimum: lowest truth index on ties
    return VoronoiPartition(tuple(tuple(int(i) for i in np.flatnonzero(owner == j)) for j in range(T.shape[0])),
                            metric)


def _theta(G) -> np.ndarray:
    return np.hstack([G.omegas, G.etas])


def voronoi_cells(fitted, truth, block: str = "omega+eta") -> VoronoiPartition:
    """Cells of a softmax or dense-to-sparse measure. ``block`` picks the coordinates
    forming theta: ``omega+eta`` (default), ``omega`` or ``eta``."""
    pick = {"omega+eta": _theta, "omega": lambda G: G.omegas, "eta": lambda G: G.etas}[block]
    return assign_cells(pick(fitted), pick(truth), metric=f"l2[{block}]")


def voronoi_cells_hierarchical(fitted: HierarchicalMixingMeasure,
                               truth: HierarchicalMixingMeasure) -> HierarchicalPartition:
    _require(fitted, truth, HierarchicalMixingMeasure)
    if fitted.n_groups != truth.n_groups:
        raise ValueError(f"fitted measure has {fitted.n_groups} groups, truth has {truth.n_groups}")
    outer = assign_cells(fitted.omegas, truth.omegas, metric="l2[omega]")
    inner = {}
    for j1, cell in enumerate(outer.cells):
        t_theta = np.hstack([truth.kappas[j1], truth.etas[j1]])
        for i1 in cell:
            f_theta = np.hstack([fitted.kappas[i1], fitted.etas[i1]])
            inner[i1] = assign_cells(f_theta, t_theta, metric="l2[kappa+eta]")
    return HierarchicalPartition(outer, inner)


# ---------------------------------------------------------------------------
# losses


def _require(fitted, truth, cls):
    if type(fitted) is not cls or type(truth) is not cls:
        raise FamilyMismatchError(f"expected two {cls.__name__} measures, got "
                                  f"{type(fitted).__name__} and {type(truth).__name__}")
    if fitted.d != truth.d or fitted.expert != truth.expert:
        raise FamilyMismatchError("fitted and true measures use different dimensions or expert families")


def _require_linear(G):
    if G.expert.kind != "linear":
        raise FamilyMismatchError("this loss is defined for linear experts only")


def _norm(v) -> float:
    return float(np.linalg.norm(v))


def _weight_mismatch(cells, fitted_w, truth_w) -> float:
    # empty cells contribute |0 - truth weight|
    return sum(abs(sum(fitted_w[i] for i in cell) - truth_w[j]) for j, cell in enumerate(cells))


def loss_L1(fitted: SoftmaxMixingMeasure, truth: SoftmaxMixingMeasure) -> LossReport:
    _require(fitted, truth, SoftmaxMixingMeasure)
    part = voronoi_cells(fitted, truth)
    w, ws = fitted.weights, truth.weights
    exact = over = 0.0
    for j, cell in enumerate(part.cells):
        for i in cell:
            dw = _norm(fitted.omegas[i] - truth.omegas[j])
            de = _norm(fitted.etas[i] - truth.etas[j])
            if len(cell) == 1:
                exact += w[i] * (dw + de)
            else:
                over += w[i] * (dw**2 + de**2)
    terms = {"weight": _weight_mismatch(part.cells, w, ws), "exact": exact, "over": over}
    return LossReport("L1", terms, part)


def _split_ab(G, i):
    d = G.d
    return G.etas[i][:d], G.etas[i][d]


def loss_L2r(fitted: SoftmaxMixingMeasure, truth: SoftmaxMixingMeasure, r: float = 1.0) -> LossReport:
    _require(fitted, truth, SoftmaxMixingMeasure)
    _require_linear(fitted)
    if r < 1:
        raise ValueError("r must be >= 1")
    part = voronoi_cells(fitted, truth)
    w = fitted.weights
    t = {"omega": 0.0, "a": 0.0, "b": 0.0}
    for j, cell in enumerate(part.cells):
        aj, bj = _split_ab(truth, j)
        for i in cell:
            ai, bi = _split_ab(fitted, i)
            t["omega"] += w[i] * _norm(fitted.omegas[i] - truth.omegas[j]) ** r
            t["a"] += w[i] * _norm(ai - aj) ** r
            t["b"] += w[i] * abs(bi - bj) ** r
    terms = {"weight": _weight_mismatch(part.cells, w, truth.weights), **t}
    return LossReport("L2", terms, part, r=r)


def loss_L3r(fitted: DenseToSparseMixingMeasure, truth: DenseToSparseMixingMeasure, r: float = 1.0) -> LossReport:
    _require(fitted, truth, DenseToSparseMixingMeasure)
    if r < 1:
        raise ValueError("r must be >= 1")
    part = voronoi_cells(fitted, truth)
    w = fitted.scaled_weights
    dtau = abs(fitted.tau - truth.tau) ** r
    t = {"omega": 0.0, "tau": 0.0, "eta": 0.0}
    for j, cell in enumerate(part.cells):
        for i in cell:
            t["omega"] += w[i] * _norm(fitted.omegas[i] - truth.omegas[j]) ** r
            t["tau"] += w[i] * dtau
            t["eta"] += w[i] * _norm(fitted.etas[i] - truth.etas[j]) ** r
    terms = {"weight": _weight_mismatch(part.cells, w, truth.scaled_weights), **t}
    return LossReport("L3", terms, part, r=r)


def loss_L4(fitted: DenseToSparseMixingMeasure, truth: DenseToSparseMixingMeasure) -> LossReport:
    _require(fitted, truth, DenseToSparseMixingMeasure)
    part = voronoi_cells(fitted, truth)
    w = fitted.scaled_weights
    dtau = abs(fitted.tau - truth.tau)
    exact = squared = 0.0
    for j, cell in enumerate(part.cells):
        for i in cell:
            dw = _norm(fitted.omegas[i] - truth.omegas[j])
            de = _norm(fitted.etas[i] - truth.etas[j])
            if len(cell) == 1:
                exact += w[i] * (dw + dtau + de)
            squared += w[i] * (dw**2 + dtau**2 + de**2)
    terms = {"weight": _weight_mismatch(part.cells, w, truth.scaled_weights), "exact": exact, "squared": squared}
    return LossReport("L4", terms, part)


def _inner_blocks(fitted, truth, part, inner_term):
    """Accumulate the nested (group-weighted) inner terms shared by L5 and L6."""
    wf_outer = np.exp(fitted.betas)
    acc: dict[str, float] = {}
    inner_weight = 0.0
    for j1, cell in enumerate(part.outer.cells):
        for i1 in cell:
            sub = part.inner[i1]
            wi = np.exp(fitted.nus[i1])
            for key, val in inner_term(i1, j1, sub, wi).items():
                acc[key] = acc.get(key, 0.0) + wf_outer[i1] * val
            inner_weight += wf_outer[i1] * _weight_mismatch(sub.cells, wi, np.exp(truth.nus[j1]))
    return acc, inner_weight


def loss_L5(fitted: HierarchicalMixingMeasure, truth: HierarchicalMixingMeasure) -> LossReport:
    part = voronoi_cells_hierarchical(fitted, truth)
    wf = np.exp(fitted.betas)

    def inner_term(i1, j1, sub, wi):
        exact = over = 0.0
        for j2, cell in enumerate(sub.cells):
            for i2 in cell:
                dk = _norm(fitted.kappas[i1, i2] - truth.kappas[j1, j2])
                de = _norm(fitted.etas[i1, i2] - truth.etas[j1, j2])
                if len(cell) == 1:
                    exact += wi[i2] * (dk + de)
                else:
                    over += wi[i2] * (dk**2 + de**2)
        return {"inner_exact": exact, "inner_over": over}

    acc, inner_weight = _inner_blocks(fitted, truth, part, inner_term)
    outer_omega = sum(wf[i1] * _norm(fitted.omegas[i1] - truth.omegas[j1])
                      for j1, cell in enumerate(part.outer.cells) for i1 in cell)
    terms = {
        "outer_weight": _weight_mismatch(part.outer.cells, wf, np.exp(truth.betas)),
        "outer_omega": outer_omega,
        "inner_exact": acc.get("inner_exact", 0.0),
        "inner_over": acc.get("inner_over", 0.0),
        "inner_weight": inner_weight,
    }
    return LossReport("L5", terms, part)


def loss_L6r(fitted: HierarchicalMixingMeasure, truth: HierarchicalMixingMeasure, r: float = 1.0) -> LossReport:
    _require(fitted, truth, HierarchicalMixingMeasure)
    _require_linear(fitted)
    if r < 1:
        raise ValueError("r must be >= 1")
    part = voronoi_cells_hierarchical(fitted, truth)
    wf = np.exp(fitted.betas)
    d = fitted.d

    def inner_term(i1, j1, sub, wi):
        t = {"inner_kappa": 0.0, "inner_a": 0.0, "inner_b": 0.0}
        for j2, cell in enumerate(sub.cells):
            for i2 in cell:
                t["inner_kappa"] += wi[i2] * _norm(fitted.kappas[i1, i2] - truth.kappas[j1, j2]) ** r
                t["inner_a"] += wi[i2] * _norm(fitted.etas[i1, i2, :d] - truth.etas[j1, j2, :d]) ** r
                t["inner_b"] += wi[i2] * abs(fitted.etas[i1, i2, d] - truth.etas[j1, j2, d]) ** r
        return t

    acc, inner_weight = _inner_blocks(fitted, truth, part, inner_term)
    outer_omega = sum(wf[i1] * _norm(fitted.omegas[i1] - truth.omegas[j1]) ** r
                      for j1, cell in enumerate(part.outer.cells) for i1 in cell)
    terms = {
        "outer_weight": _weight_mismatch(part.outer.cells, wf, np.exp(truth.betas)),
        "outer_omega": outer_omega,
        **{k: acc.get(k, 0.0) for k in ("inner_kappa", "inner_a", "inner_b")},
        "inner_weight": inner_weight,
    }
    return LossReport("L6", terms, part, r=r)


# ---------------------------------------------------------------------------
# worst-case parameter discrepancy


def _cell_rms(F, T, w, cells) -> list[float]:
    """Mass-weighted RMS distance of each cell's atoms to its truth atom. An empty cell
    reports the distance from its truth atom to the closest fitted atom."""
    out = []
    for j, cell in enumerate(cells):
        if cell:
            idx = list(cell)
            sq = np.sum((F[idx] - T[j]) ** 2, axis=1)
            out.append(float(np.sqrt(np.sum(w[idx] * sq) / np.sum(w[idx]))))
        else:
            out.append(float(np.min(np.linalg.norm(F - T[j], axis=1))))
    return out


def parameter_discrepancy(fitted, truth) -> LossReport:
    """Worst per-cell parameter error.

    For each truth atom, the mass-weighted RMS distance of the fitted atoms in its
    Voronoi cell; the value is the largest of these (for the dense-to-sparse family the
    temperature error is included, for the hierarchical family the group gate errors).
    Singleton cells give plain parameter errors, over-specified cells the averaged
    spread, so the value tracks the slowest parameter estimation rate.
    """
    if type(fitted) is not type(truth):
        raise FamilyMismatchError("fitted and true measures belong to different families")
    if isinstance(truth, HierarchicalMixingMeasure):
        part = voronoi_cells_hierarchical(fitted, truth)
        worst_outer = max(_cell_rms(fitted.omegas, truth.omegas, np.exp(fitted.betas), part.outer.cells))
        worst_inner = 0.0
        for j1, cell in enumerate(part.outer.cells):
            T = np.hstack([truth.kappas[j1], truth.etas[j1]])
            for i1 in cell:
                F = np.hstack([fitted.kappas[i1], fitted.etas[i1]])
                worst_inner = max(worst_inner, max(_cell_rms(F, T, np.exp(fitted.nus[i1]), part.inner[i1].cells)))
        terms = {"outer": worst_outer, "inner": max(worst_inner - worst_outer, 0.0)}
        return LossReport("param_worst", terms, part)
    part = voronoi_cells(fitted, truth)
    if isinstance(truth, DenseToSparseMixingMeasure):
        w = fitted.scaled_weights
        dtau = abs(fitted.tau - truth.tau)
    else:
        w = fitted.weights
        dtau = 0.0
    worst = max(_cell_rms(_theta(fitted), _theta(truth), w, part.cells))
    value = max(worst, dtau)
    return LossReport("param_worst", {"atoms": worst, "tau": value - worst}, part)
