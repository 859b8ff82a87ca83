"""Run the standard rate scenarios over several master seeds and print the median slopes.

Results land in ``<out>/<scenario>/seed_<s>/``; rerunning resumes from the journals, so the
acceptance suite can reuse a finished run.
"""
import argparse
import time

from moelab.harness import run_seeds, standard_scenarios

RATE_SEEDS = (1, 2, 3)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/rates")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seeds", type=int, nargs="+", default=list(RATE_SEEDS))
    parser.add_argument("--only", nargs="+", help="subset of scenario names")
    args = parser.parse_args()

    scenarios = standard_scenarios()
    names = args.only or list(scenarios)
    for name in names:
        cfg = scenarios[name]
        t0 = time.perf_counter()
        medians = run_seeds(cfg, args.seeds, threads=args.threads, resume=True, out_dir=f"{args.out}/{name}")
        for t in cfg.targets:
            verdict = "PASS" if t.check(medians[t.loss]) else "FAIL"
            print(f"{name:24s} {t.loss:8s} median slope {medians[t.loss]:+.3f}  {t.describe():28s} {verdict}")
        extras = "  ".join(f"{k}={v:+.3f}" for k, v in medians.items() if k not in {t.loss for t in cfg.targets})
        print(f"{'':24s} {extras}  [{time.perf_counter() - t0:.0f}s]", flush=True)


if __name__ == "__main__":
    main()
