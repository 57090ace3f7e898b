#!/usr/bin/env python3
"""Desk-scale reaction-diffusion pipeline, end to end.

Generates train/test datasets, trains the feature-augmented conv surrogate,
trains the policy through it, then runs the tracking benchmark and the
noise-scale control ablation.  Everything is driven through the CLI so the
script doubles as a usage example.  Roughly 15-25 CPU-minutes.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from spdectl.cli import main  # noqa: E402

HERE = pathlib.Path(__file__).resolve().parents[1]
CFG = HERE / "configs"


def run(*argv):
    print(f"\n$ spdectl {' '.join(argv)}")
    code = main(list(argv))
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    threads = "2"
    run("generate", "--config", str(CFG / "rd_desk.json"),
        "--out", "runs/rd", "--threads", threads)
    run("generate", "--config", str(CFG / "rd_desk_test.json"),
        "--out", "runs/rd_test", "--threads", threads)
    run("train-surrogate", "--config", str(CFG / "rd_surrogate_conv.json"),
        "--out", "runs/rd", "--threads", threads)
    run("train-surrogate", "--config", str(CFG / "rd_surrogate_spectral.json"),
        "--out", "runs/rd", "--threads", threads)
    run("train-policy", "--config", str(CFG / "rd_policy.json"),
        "--out", "runs/rd")
    run("bench", "--config", str(CFG / "rd_bench.json"), "--out", "runs/rd")
    run("ablate", "--config", str(CFG / "rd_ablate_control.json"),
        "--out", "runs/rd")
    print("\nartifacts in runs/rd/")
