"""Identifiability audits, PDE residual survey and adversarial-sequence probes.

Writes results/checks/check.json and results/counterexamples/*.csv.
"""
import sys

from moelab.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "results"
    code = main(["check", "--out", f"{out}/checks"])
    sys.exit(code or main(["counterexample", "--out", f"{out}/counterexamples"]))
