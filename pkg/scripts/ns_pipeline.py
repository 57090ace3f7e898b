#!/usr/bin/env python3
"""Desk-scale Navier-Stokes (vorticity) modeling run.

Generates a small 2-D dataset and trains the feature-augmented spectral
surrogate on it.  Control on the 2-D system uses the same machinery as the
1-D pipeline (swap the config paths); this script covers the forward-model
leg, which is the expensive part on CPU.
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
    run("generate", "--config", str(CFG / "ns_desk.json"),
        "--out", "runs/ns", "--threads", "2")
    run("train-surrogate", "--config", str(CFG / "ns_surrogate_spectral.json"),
        "--out", "runs/ns", "--threads", "2")
    print("\nartifacts in runs/ns/")
