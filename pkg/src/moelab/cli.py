"""Command-line entry point: ``moelab {simulate,fit,sweep,check,counterexample,slope}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

from .data_gen import InputDistribution, generate_dataset
from .estimator import fit
from .harness import (
    ConfigError,
    ExperimentConfig,
    compute_loss,
    monte_carlo_points,
    replicate_seeds,
    run_seeds,
    run_sweep,
    slopes_from_csv,
    standard_scenarios,
)
from .presets import preset_truth
from .theory_checks import (
    audit_algebraic_independence,
    audit_strong_identifiability,
    counterexample_tables,
    pde_survey,
)

log = logging.getLogger("moelab")


@dataclass(frozen=True)
class CheckConfig:
    experts: tuple[str, ...] = ("ffn-sigmoid", "ffn-tanh", "ffn-gelu", "linear", "ffn-poly2", "ffn-poly3")
    pairs: tuple[tuple[str, str], ...] = (("sigmoid", "ffn-tanh"), ("poly2", "ffn-poly2"),
                                          ("linear", "ffn-tanh"), ("sigmoid", "linear"))
    k: int = 2
    d: int = 2
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    tolerance: float = 1e-6
    reduce: str = "structural"
    pde_points: int = 100


@dataclass(frozen=True)
class CounterexampleConfig:
    softmax_truth: str = "softmax_linear"
    dense_truth: str = "d2s_linear_ffn"
    hier_truth: str = "hier_linear"
    n_grid: tuple[int, ...] = (10, 100, 1000)
    r: tuple[float, ...] = (1.0, 2.0)
    mc_points: int = 100_000
    seed: int = 0


def _strict(cls, obj: dict):
    unknown = set(obj) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    obj = {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
           for k, v in obj.items()}
    return cls(**obj)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _experiment(args) -> ExperimentConfig:
    if args.config and args.scenario:
        raise ConfigError("give either --config or --scenario, not both")
    if args.config:
        cfg = ExperimentConfig.from_json(_read_json(args.config))
    elif args.scenario:
        scenarios = standard_scenarios()
        if args.scenario not in scenarios:
            raise ConfigError(f"unknown scenario {args.scenario!r}; choose from {sorted(scenarios)}")
        cfg = scenarios[args.scenario]
    else:
        raise ConfigError("need --config or --scenario")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def cmd_simulate(args) -> int:
    cfg = _experiment(args)
    truth = cfg.truth_measure()
    data_seed, _ = replicate_seeds(cfg, args.n, args.replicate)
    lo, hi = cfg.input_box
    data = generate_dataset(truth, InputDistribution(truth.d, lo, hi), args.n, cfg.noise_variance, data_seed)
    out = Path(args.out or f"dataset_n{args.n}_r{args.replicate}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(out)
    log.info("wrote %d rows to %s", data.n, out)
    return 0


def cmd_fit(args) -> int:
    cfg = _experiment(args)
    truth = cfg.truth_measure()
    data_seed, fit_seed = replicate_seeds(cfg, args.n, args.replicate)
    lo, hi = cfg.input_box
    data = generate_dataset(truth, InputDistribution(truth.d, lo, hi), args.n, cfg.noise_variance, data_seed)
    result = fit(data, cfg.family_for_fit(), cfg.fit, seed=fit_seed, truth=truth)
    out = result.to_dict()
    out["n"], out["replicate"] = args.n, args.replicate
    mc_X = monte_carlo_points(cfg, truth.d)
    out["losses"] = {s.label: compute_loss(s, result.fitted, truth, mc_X) for s in cfg.losses}
    _write(args.out, json.dumps(out, indent=2) + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    out = args.out or cfg.out_dir or f"results/{cfg.scenario}"
    if args.seeds:
        medians = run_seeds(cfg, args.seeds, threads=args.threads, resume=args.resume, out_dir=out)
        for t in cfg.targets:
            verdict = "PASS" if t.check(medians[t.loss]) else "FAIL"
            print(f"{cfg.scenario} {t.loss} median slope {medians[t.loss]:+.3f} target {t.describe()} {verdict}")
        return 0
    _, report = run_sweep(cfg, threads=args.threads, resume=args.resume, out_dir=out)
    print(report.table())
    return 0


def cmd_check(args) -> int:
    cfg = _strict(CheckConfig, _read_json(args.config)) if args.config else CheckConfig()
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    out = {"strong_identifiability": {}, "algebraic_independence": {}}
    for expert in cfg.experts:
        verdicts = [audit_strong_identifiability(expert, cfg.k, cfg.d, s, cfg.reduce, cfg.tolerance) for s in seeds]
        out["strong_identifiability"][expert] = {
            "independent": [v.independent for v in verdicts], "worst_ratio": min(v.ratio for v in verdicts),
            "verdicts": [v.to_dict() for v in verdicts]}
    for router, expert in cfg.pairs:
        verdicts = [audit_algebraic_independence(router, expert, cfg.k, cfg.d, s, cfg.reduce, cfg.tolerance)
                    for s in seeds]
        out["algebraic_independence"][f"{router}+{expert}"] = {
            "independent": [v.independent for v in verdicts], "worst_ratio": min(v.ratio for v in verdicts),
            "verdicts": [v.to_dict() for v in verdicts]}
    out["pde"] = pde_survey(cfg.pde_points, cfg.d, seed=seeds[0])
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        _write(str(Path(args.out) / "check.json"), text)
    for group in ("strong_identifiability", "algebraic_independence"):
        for name, res in out[group].items():
            print(f"{group:24s} {name:22s} independent={res['independent']} worst_ratio={res['worst_ratio']:.2e}")
    print("pde identity max residuals:", out["pde"]["identity"])
    print("pde violation counts:", out["pde"]["violation"], f"of {cfg.pde_points}")
    return 0


def cmd_counterexample(args) -> int:
    cfg = _strict(CounterexampleConfig, _read_json(args.config)) if args.config else CounterexampleConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out_dir = Path(args.out or "results/counterexamples")
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for r in cfg.r:
        tables = counterexample_tables(preset_truth(cfg.softmax_truth), preset_truth(cfg.dense_truth),
                                       preset_truth(cfg.hier_truth), cfg.n_grid, r, cfg.mc_points, cfg.seed)
        for name, table in tables.items():
            stem = f"{name}_r{r:g}"
            (out_dir / f"{stem}.csv").write_text(table.to_csv())
            summary[stem] = [row.__dict__ for row in table.rows]
            ratios = ["NA" if row.ratio is None else f"{row.ratio:.3g}" for row in table.rows]
            print(f"{stem:20s} n={list(cfg.n_grid)} ratio={ratios}")
    (out_dir / "counterexamples.json").write_text(json.dumps({"config": asdict(cfg), "tables": summary},
                                                             indent=2) + "\n")
    return 0


def cmd_slope(args) -> int:
    reports = slopes_from_csv(args.csv)
    text = "\n".join(r.table() for r in reports) + "\n"
    if args.out:
        _write(str(Path(args.out) / "slopes.json"), json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--resume", action="store_true", help="continue a partial sweep")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="moelab", description="Mixture-of-experts estimation rate experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("simulate", "dump one replicate's dataset as CSV"),
                           ("fit", "fit one replicate and write the result as JSON")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--scenario", help="name of a standard scenario instead of --config")
        p.add_argument("--n", type=int, required=True, help="sample size")
        p.add_argument("--replicate", type=int, default=0)

    p = sub.add_parser("sweep", parents=[common], help="run a sample-size sweep")
    p.add_argument("--scenario", help="name of a standard scenario instead of --config")
    p.add_argument("--seeds", type=int, nargs="+", help="run once per master seed and report median slopes")

    sub.add_parser("check", parents=[common], help="identifiability audits and PDE residuals")
    sub.add_parser("counterexample", parents=[common], help="adversarial sequences and L2 ratio probes")
    p = sub.add_parser("slope", parents=[common], help="re-fit slopes from a results CSV")
    p.add_argument("csv", help="results.csv written by sweep")
    return parser


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "sweep": cmd_sweep, "check": cmd_check,
            "counterexample": cmd_counterexample, "slope": cmd_slope}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
