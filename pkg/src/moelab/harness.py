"""Sample-size sweeps: replicate management, loss bookkeeping, slope fitting and reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import voronoi
from .data_gen import InputDistribution, derive_seed, generate_dataset, philox_stream
from .estimator import FitConfig, FitFailure, ModelFamily, fit
from .model_core import (
    DenseToSparseMixingMeasure,
    HierarchicalMixingMeasure,
    MixingMeasure,
    measure_from_dict,
)
from .presets import preset_truth

CSV_COLUMNS = ["scenario", "n", "replicate", "loss_name", "r", "loss_value", "objective", "converged",
               "winner_start", "wall_ms"]

DEFAULT_N_GRID = (1000, 3000, 10000, 30000, 100000)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LossSpec:
    """A loss to record. ``term`` selects one breakdown term instead of the total."""

    name: str
    r: Optional[float] = None
    term: Optional[str] = None

    NAMES = ("L1", "L2", "L3", "L4", "L5", "L6", "param_worst", "regression_l2")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ConfigError(f"unknown loss {self.name!r}; choose from {', '.join(self.NAMES)}")
        needs_r = self.name in ("L2", "L3", "L6")
        if needs_r and self.r is None:
            object.__setattr__(self, "r", 1.0)
        if not needs_r and self.r is not None:
            raise ConfigError(f"loss {self.name} takes no exponent r")
        if self.r is not None and self.r < 1:
            raise ConfigError("loss exponent r must be >= 1")

    @property
    def label(self) -> str:
        return self.name if self.term is None else f"{self.name}:{self.term}"

    @classmethod
    def parse(cls, obj: Union[str, dict]) -> "LossSpec":
        if isinstance(obj, str):
            name, _, term = obj.partition(":")
            return cls(name, term=term or None)
        unknown = set(obj) - {"name", "r", "term"}
        if unknown:
            raise ConfigError(f"unknown loss keys: {sorted(unknown)}")
        return cls(obj["name"], obj.get("r"), obj.get("term"))

    def to_json(self) -> dict:
        return {"name": self.name, "r": self.r, "term": self.term}


@dataclass(frozen=True)
class RateTarget:
    """Theoretical slope for one loss: a band around a target, or a ``log-slow`` floor."""

    loss: str
    kind: str = "band"
    slope: Optional[float] = None
    band: Optional[tuple[float, float]] = None
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind == "band":
            if self.band is None or len(self.band) != 2 or self.band[0] > self.band[1]:
                raise ConfigError("band targets need [low, high]")
            object.__setattr__(self, "band", (float(self.band[0]), float(self.band[1])))
        elif self.kind == "log-slow":
            if self.threshold is None:
                raise ConfigError("log-slow targets need a threshold")
        else:
            raise ConfigError(f"unknown target kind {self.kind!r}")

    def check(self, slope: float) -> bool:
        if not np.isfinite(slope):
            return False
        if self.kind == "band":
            return self.band[0] <= slope <= self.band[1]
        return slope > self.threshold

    def describe(self) -> str:
        if self.kind == "band":
            return f"{self.slope:+.3f} in [{self.band[0]:+.2f}, {self.band[1]:+.2f}]"
        return f"log-slow (> {self.threshold:+.2f})"

    @classmethod
    def from_json(cls, obj: dict) -> "RateTarget":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown target keys: {sorted(unknown)}")
        obj = dict(obj)
        if obj.get("band") is not None:
            obj["band"] = tuple(obj["band"])
        return cls(**obj)

    def to_json(self) -> dict:
        out = asdict(self)
        if self.band is not None:
            out["band"] = list(self.band)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    truth: Union[str, dict]
    k_fit: int
    exact_specified: bool
    n_grid: tuple[int, ...] = DEFAULT_N_GRID
    replicates: int = 20
    noise_variance: float = 0.01
    input_box: tuple[float, float] = (-1.0, 1.0)
    fit: Optional[FitConfig] = None
    losses: tuple[LossSpec, ...] = (LossSpec("param_worst"),)
    targets: tuple[RateTarget, ...] = ()
    seed: int = 0
    out_dir: Optional[str] = None
    mc_points: int = 20000
    record_wall_time: bool = False
    # optional descriptors, checked against the truth when given
    family: Optional[str] = None
    expert: Optional[str] = None
    router: Optional[str] = None
    d: Optional[int] = None
    k_star: Optional[int] = None
    n_groups: Optional[int] = None

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        if len(grid) < 2 or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
            raise ConfigError("n_grid must be strictly increasing with at least 2 positive entries")
        object.__setattr__(self, "n_grid", grid)
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be nonnegative")
        if self.mc_points < 1:
            raise ConfigError("mc_points must be positive")
        object.__setattr__(self, "input_box", tuple(float(v) for v in self.input_box))
        object.__setattr__(self, "losses", tuple(self.losses))
        object.__setattr__(self, "targets", tuple(self.targets))
        fit_cfg = self.fit if self.fit is not None else FitConfig(k_fit=self.k_fit)
        if fit_cfg.k_fit != self.k_fit:
            raise ConfigError(f"fit.k_fit={fit_cfg.k_fit} disagrees with k_fit={self.k_fit}")
        object.__setattr__(self, "fit", fit_cfg)
        truth = self.truth_measure()
        k_star = _atom_budget(truth)
        if self.exact_specified and self.k_fit != k_star:
            raise ConfigError(f"exact-specified fits need k_fit == k_star ({k_star}), got {self.k_fit}")
        if self.k_fit < k_star:
            raise ConfigError(f"k_fit={self.k_fit} is below the true number of atoms {k_star}")
        declared = {"family": truth.family_name, "expert": truth.expert.label, "d": truth.d, "k_star": k_star,
                    "router": truth.router.label if isinstance(truth, DenseToSparseMixingMeasure) else None,
                    "n_groups": truth.n_groups if isinstance(truth, HierarchicalMixingMeasure) else None}
        for key, actual in declared.items():
            given = getattr(self, key)
            if given is not None and given != actual:
                raise ConfigError(f"{key}={given!r} does not match the truth ({actual!r})")
        labels = {s.label for s in self.losses}
        for t in self.targets:
            if t.loss not in labels:
                raise ConfigError(f"target refers to loss {t.loss!r} which is not computed")
        for spec in self.losses:
            _check_loss_applies(spec, truth)

    def truth_measure(self) -> MixingMeasure:
        if isinstance(self.truth, str):
            return preset_truth(self.truth)
        return measure_from_dict(self.truth)

    def family_for_fit(self) -> ModelFamily:
        return ModelFamily.like(self.truth_measure(), self.k_fit)

    def to_json(self) -> dict:
        out = {}
        for key in self.__dataclass_fields__:
            val = getattr(self, key)
            if key == "fit":
                val = val.to_json()
            elif key == "losses":
                val = [s.to_json() for s in val]
            elif key == "targets":
                val = [t.to_json() for t in val]
            elif isinstance(val, tuple):
                val = list(val)
            out[key] = val
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        obj = dict(obj)
        for key in ("scenario", "truth", "k_fit", "exact_specified"):
            if key not in obj:
                raise ConfigError(f"missing required config key {key!r}")
        if obj.get("fit") is not None:
            fit_obj = dict(obj["fit"])
            fit_obj.setdefault("k_fit", obj["k_fit"])
            try:
                obj["fit"] = FitConfig.from_json(fit_obj)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
        if "losses" in obj:
            obj["losses"] = tuple(LossSpec.parse(s) for s in obj["losses"])
        if "targets" in obj:
            obj["targets"] = tuple(RateTarget.from_json(t) for t in obj["targets"])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def fingerprint(self) -> str:
        """Hash of everything that influences the records (not the output location)."""
        obj = self.to_json()
        obj.pop("out_dir")
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _atom_budget(truth: MixingMeasure) -> int:
    return truth.k_inner if isinstance(truth, HierarchicalMixingMeasure) else truth.k


def _check_loss_applies(spec: LossSpec, truth: MixingMeasure) -> None:
    fam = truth.family_name
    ok = {
        "L1": fam == "softmax",
        "L2": fam == "softmax" and truth.expert.kind == "linear",
        "L3": fam == "dense_to_sparse",
        "L4": fam == "dense_to_sparse",
        "L5": fam == "hierarchical",
        "L6": fam == "hierarchical" and truth.expert.kind == "linear",
    }.get(spec.name, True)
    if not ok:
        raise ConfigError(f"loss {spec.name} does not apply to a {fam} truth with {truth.expert.label} experts")


# ---------------------------------------------------------------------------
# replicates


@dataclass
class ReplicateRecord:
    scenario: str
    n: int
    replicate: int
    losses: dict  # label -> (r, value)
    objective: float
    converged: bool
    winner_start: str
    wall_ms: float
    failed: bool = False
    error: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        out["losses"] = {k: [r, v] for k, (r, v) in self.losses.items()}
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ReplicateRecord":
        obj = dict(obj)
        obj["losses"] = {k: (r, v) for k, (r, v) in obj["losses"].items()}
        return cls(**obj)


def monte_carlo_points(config: ExperimentConfig, d: int) -> np.ndarray:
    lo, hi = config.input_box
    rng = philox_stream(derive_seed(config.seed, config.scenario, "mc"))
    return lo + (hi - lo) * rng.random((config.mc_points, d))


def regression_l2(fitted: MixingMeasure, truth: MixingMeasure, X: np.ndarray) -> float:
    """Monte Carlo estimate of the L2(mu) distance between two regression functions."""
    diff = fitted.evaluate(X) - truth.evaluate(X)
    return float(np.sqrt(np.mean(diff**2)))


_LOSS_FUNCS = {
    "L1": lambda f, t, r: voronoi.loss_L1(f, t),
    "L2": lambda f, t, r: voronoi.loss_L2r(f, t, r),
    "L3": lambda f, t, r: voronoi.loss_L3r(f, t, r),
    "L4": lambda f, t, r: voronoi.loss_L4(f, t),
    "L5": lambda f, t, r: voronoi.loss_L5(f, t),
    "L6": lambda f, t, r: voronoi.loss_L6r(f, t, r),
    "param_worst": lambda f, t, r: voronoi.parameter_discrepancy(f, t),
}


def compute_loss(spec: LossSpec, fitted: MixingMeasure, truth: MixingMeasure,
                 mc_X: Optional[np.ndarray] = None) -> float:
    if spec.name == "regression_l2":
        if mc_X is None:
            raise ValueError("regression_l2 needs Monte Carlo points")
        return regression_l2(fitted, truth, mc_X)
    report = _LOSS_FUNCS[spec.name](fitted, truth, spec.r)
    if spec.term is None:
        return report.value
    if spec.term not in report.terms:
        raise ConfigError(f"loss {spec.name} has no term {spec.term!r}; terms: {', '.join(report.terms)}")
    return report.terms[spec.term]


def replicate_seeds(config: ExperimentConfig, n: int, replicate: int) -> tuple[int, int]:
    """(data seed, fit seed) for one replicate."""
    base = (config.seed, config.scenario, n, replicate)
    return derive_seed(*base, "data"), derive_seed(*base, "fit")


def run_replicate(config: ExperimentConfig, n: int, replicate_index: int,
                  mc_X: Optional[np.ndarray] = None) -> ReplicateRecord:
    """Dataset, fit and every requested loss for one (n, replicate) cell of the sweep."""
    truth = config.truth_measure()
    if mc_X is None and any(s.name == "regression_l2" for s in config.losses):
        mc_X = monte_carlo_points(config, truth.d)
    data_seed, fit_seed = replicate_seeds(config, n, replicate_index)
    t0 = time.perf_counter()
    lo, hi = config.input_box
    dataset = generate_dataset(truth, InputDistribution(truth.d, lo, hi), n, config.noise_variance, seed=data_seed)
    try:
        result = fit(dataset, config.family_for_fit(), config.fit, seed=fit_seed, truth=truth)
    except FitFailure as exc:
        wall = (time.perf_counter() - t0) * 1e3
        losses = {s.label: (s.r, math.nan) for s in config.losses}
        return ReplicateRecord(config.scenario, n, replicate_index, losses, math.nan, False, "failed", wall,
                               failed=True, error=str(exc))
    losses = {s.label: (s.r, compute_loss(s, result.fitted, truth, mc_X)) for s in config.losses}
    wall = (time.perf_counter() - t0) * 1e3
    return ReplicateRecord(config.scenario, n, replicate_index, losses, result.objective, result.converged,
                           result.winner_start, wall)


# ---------------------------------------------------------------------------
# slopes and reports


def estimate_slope(points) -> tuple[float, float, float]:
    """OLS fit of log(loss) on log(n); returns (slope, intercept, R^2)."""
    pts = [(float(n), float(v)) for n, v in points]
    kept = [(n, v) for n, v in pts if n > 0 and v > 0 and np.isfinite(v)]
    if len(kept) < len(pts):
        warnings.warn(f"excluded {len(pts) - len(kept)} nonpositive or non-finite points from the slope fit",
                      stacklevel=2)
    if len(kept) < 2:
        raise ValueError("slope estimation needs at least 2 positive points")
    x = np.log([n for n, _ in kept])
    y = np.log([v for _, v in kept])
    if np.ptp(x) == 0:
        raise ValueError("slope estimation needs at least 2 distinct sample sizes")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


@dataclass
class LossRate:
    loss: str
    r: Optional[float]
    n_values: list[int]
    medians: list[float]
    q25: list[float]
    q75: list[float]
    counts: list[int]
    slope: float
    intercept: float
    r2: float
    target: Optional[RateTarget] = None
    passed: Optional[bool] = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["target"] = None if self.target is None else self.target.to_json()
        return out


@dataclass
class RateReport:
    scenario: str
    seed: int
    rates: list[LossRate] = field(default_factory=list)

    def rate(self, loss: str) -> LossRate:
        for rate in self.rates:
            if rate.loss == loss:
                return rate
        raise KeyError(loss)

    @property
    def passed(self) -> bool:
        flags = [r.passed for r in self.rates if r.passed is not None]
        return bool(flags) and all(flags)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "seed": self.seed, "rates": [r.to_dict() for r in self.rates]}

    def table(self) -> str:
        lines = [f"{'scenario':28s} {'loss':14s} {'slope':>8s} {'R^2':>6s}  {'target':32s} verdict"]
        for rate in self.rates:
            tgt = rate.target.describe() if rate.target else "-"
            verdict = "-" if rate.passed is None else ("PASS" if rate.passed else "FAIL")
            slope = f"{rate.slope:+.3f}" if np.isfinite(rate.slope) else "nan"
            lines.append(f"{self.scenario:28s} {rate.loss:14s} {slope:>8s} {rate.r2:6.3f}  {tgt:32s} {verdict}")
        return "\n".join(lines)


def build_report(config: ExperimentConfig, records: list[ReplicateRecord]) -> RateReport:
    report = RateReport(config.scenario, config.seed)
    targets = {t.loss: t for t in config.targets}
    for spec in config.losses:
        meds, q25, q75, counts = [], [], [], []
        for n in config.n_grid:
            vals = np.array([rec.losses[spec.label][1] for rec in records if rec.n == n and not rec.failed])
            vals = vals[np.isfinite(vals)]
            counts.append(int(vals.size))
            if vals.size:
                a, m, b = np.percentile(vals, [25, 50, 75])
            else:
                a = m = b = math.nan
            meds.append(float(m))
            q25.append(float(a))
            q75.append(float(b))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                slope, intercept, r2 = estimate_slope(zip(config.n_grid, meds))
        except ValueError:
            slope = intercept = r2 = math.nan
        target = targets.get(spec.label)
        passed = None if target is None else target.check(slope)
        report.rates.append(LossRate(spec.label, spec.r, list(config.n_grid), meds, q25, q75, counts,
                                     slope, intercept, r2, target, passed))
    return report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(records: list[ReplicateRecord], include_wall_time: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in sorted(records, key=lambda r: (r.n, r.replicate)):
        wall = repr(round(rec.wall_ms, 3)) if include_wall_time else "0"
        for label, (r, value) in rec.losses.items():
            writer.writerow([rec.scenario, rec.n, rec.replicate, label, _fmt(None if r is None else float(r)),
                             _fmt(float(value)), _fmt(float(rec.objective)), _fmt(rec.converged),
                             rec.winner_start, wall])
    return buf.getvalue()


def read_records_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def slopes_from_csv(path, targets: tuple[RateTarget, ...] = ()) -> list[RateReport]:
    """Recompute per-scenario, per-loss slopes from a results CSV."""
    rows = read_records_csv(path)
    tmap = {t.loss: t for t in targets}
    reports = {}
    for scenario in dict.fromkeys(row["scenario"] for row in rows):
        report = RateReport(scenario, seed=-1)
        srows = [row for row in rows if row["scenario"] == scenario]
        for loss in dict.fromkeys(row["loss_name"] for row in srows):
            lrows = [row for row in srows if row["loss_name"] == loss]
            ns = sorted({int(row["n"]) for row in lrows})
            meds, q25, q75, counts = [], [], [], []
            for n in ns:
                vals = np.array([float(row["loss_value"]) for row in lrows if int(row["n"]) == n])
                vals = vals[np.isfinite(vals)]
                counts.append(int(vals.size))
                a, m, b = np.percentile(vals, [25, 50, 75]) if vals.size else (math.nan,) * 3
                meds.append(float(m))
                q25.append(float(a))
                q75.append(float(b))
            r = lrows[0]["r"]
            slope, intercept, r2 = estimate_slope(zip(ns, meds))
            target = tmap.get(loss)
            report.rates.append(LossRate(loss, float(r) if r else None, ns, meds, q25, q75, counts, slope,
                                         intercept, r2, target, None if target is None else target.check(slope)))
        reports[scenario] = report
    return list(reports.values())


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_report(report: RateReport, records: list[ReplicateRecord], out_dir, include_wall_time: bool = False
                ) -> dict[str, Path]:
    """Write results.csv, report.json and report.txt into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {"csv": out / "results.csv", "json": out / "report.json", "text": out / "report.txt"}
    _atomic_write(paths["csv"], records_csv(records, include_wall_time))
    _atomic_write(paths["json"], json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _atomic_write(paths["text"], report.table() + "\n")
    return paths


# ---------------------------------------------------------------------------
# sweeps


def _run_task(args):
    config, n, rep = args
    return run_replicate(config, n, rep)


def _load_partial(path: Path) -> dict:
    done = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            try:
                rec = ReplicateRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError):
                continue  # a torn final line from an interrupted run
            done[(rec.n, rec.replicate)] = rec
    return done


def run_sweep(config: ExperimentConfig, threads: int = 1, resume: bool = False,
              out_dir=None) -> tuple[list[ReplicateRecord], RateReport]:
    """Every (n, replicate) record plus the slope report. With an output directory the
    records are journalled as they complete, so ``resume`` can skip finished work."""
    out_dir = out_dir if out_dir is not None else config.out_dir
    tasks = [(n, rep) for n in config.n_grid for rep in range(config.replicates)]
    done: dict = {}
    journal = None
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc}") from exc
        journal = out / "records.jsonl"
        stamp = out / "config.json"
        fp = config.fingerprint()
        if resume and stamp.exists():
            previous = json.loads(stamp.read_text()).get("fingerprint")
            if previous != fp:
                raise ConfigError(f"{out} holds results of a different configuration; refusing to resume")
            done = _load_partial(journal)
        else:
            journal.write_text("")
        _atomic_write(stamp, json.dumps({"fingerprint": fp, "config": config.to_json()}, indent=2,
                                        sort_keys=True) + "\n")
    todo = [t for t in tasks if t not in done]
    fh = journal.open("a") if journal is not None else None
    try:
        def keep(rec):
            done[(rec.n, rec.replicate)] = rec
            if fh is not None:
                fh.write(json.dumps(rec.to_dict()) + "\n")
                fh.flush()

        if threads > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                for rec in pool.map(_run_task, [(config, n, rep) for n, rep in todo]):
                    keep(rec)
        else:
            for n, rep in todo:
                keep(run_replicate(config, n, rep))
    finally:
        if fh is not None:
            fh.close()
    records = [done[t] for t in sorted(tasks)]
    report = build_report(config, records)
    if out_dir is not None:
        emit_report(report, records, out_dir, include_wall_time=config.record_wall_time)
        timings = "n,replicate,wall_ms\n" + "".join(f"{r.n},{r.replicate},{r.wall_ms:.3f}\n" for r in records)
        _atomic_write(Path(out_dir) / "timings.csv", timings)
    return records, report


def run_seeds(config: ExperimentConfig, seeds, threads: int = 1, resume: bool = False, out_dir=None
              ) -> dict[str, float]:
    """Sweep once per master seed (each in ``out_dir/seed_<s>``) and return, per loss,
    the median slope across seeds."""
    slopes: dict[str, list[float]] = {}
    for s in seeds:
        cfg = replace(config, seed=int(s))
        sub = None if out_dir is None else Path(out_dir) / f"seed_{s}"
        _, report = run_sweep(cfg, threads=threads, resume=resume, out_dir=sub)
        for rate in report.rates:
            slopes.setdefault(rate.loss, []).append(rate.slope)
    return {loss: float(np.median(v)) for loss, v in slopes.items()}


# ---------------------------------------------------------------------------
# standard scenarios


EXACT = dict(kind="band", slope=-0.5, band=(-0.65, -0.35))
OVER = dict(kind="band", slope=-0.25, band=(-0.40, -0.15))
LOG_SLOW = dict(kind="log-slow", threshold=-0.15)

# scenario -> (preset, k_fit offset over k_star, primary loss, target)
_STANDARD = {
    "softmax_ffn_exact": ("softmax_ffn", 0, "L1", EXACT),
    "softmax_ffn_over": ("softmax_ffn", 1, "L1", OVER),
    "softmax_linear_over": ("softmax_linear", 1, "L2", LOG_SLOW),
    "d2s_linear_router_tau": ("d2s_linear_ffn", 0, "L3:tau", LOG_SLOW),
    "d2s_general_exact": ("d2s_sigmoid_tanh", 0, "L4", EXACT),
    "d2s_general_over": ("d2s_sigmoid_tanh", 1, "L4", OVER),
    "hier_ffn_exact": ("hier_ffn", 0, "L5", EXACT),
    "hier_ffn_over": ("hier_ffn", 1, "L5", OVER),
    "hier_linear_over": ("hier_linear", 1, "L6", LOG_SLOW),
}


def standard_fit_config(k_fit: int) -> FitConfig:
    """Optimizer settings of the standard sweeps: one warm start, Levenberg-Marquardt."""
    return FitConfig(k_fit=k_fit, restarts=1, init_mode="warm", max_iters=3000, ftol=1e-9)


def standard_scenarios() -> dict[str, ExperimentConfig]:
    out = {}
    for name, (preset, extra, primary, target) in _STANDARD.items():
        truth = preset_truth(preset)
        k_fit = _atom_budget(truth) + extra
        spec = LossSpec.parse(primary)
        losses = [spec, LossSpec("param_worst"), LossSpec("regression_l2")]
        if spec.name in ("L2", "L3", "L6"):
            spec = replace(spec, r=1.0)
            losses[0] = spec
        out[name] = ExperimentConfig(
            scenario=name, truth=preset, k_fit=k_fit, exact_specified=extra == 0,
            fit=standard_fit_config(k_fit), losses=tuple(losses),
            targets=(RateTarget(spec.label, **target),),
        )
    return out
