"""Noise-scale modeling ablation: train and test forward models per sigma.

For each noise scale, a fresh dataset pair is generated at that scale and
both the feature variant and the plain variant of the configured backbone
are trained (over several seeds).  The emitted records let the caller
compare how each variant's test error grows with the noise scale.
"""

from __future__ import annotations

import dataclasses

from . import config as cfg_mod
from .rng import derive_seed
from .solver import generate_dataset
from .surrogate import SurrogateModel, evaluate_model, train


def modeling_noise_ablation(cfg: dict, args) -> list:
    problem = cfg_mod.problem_from_config(cfg)
    sampler = cfg_mod.sampler_from_config(cfg)
    sur_cfg = cfg_mod.surrogate_from_config(cfg)
    train_cfg = cfg_mod.train_from_config(cfg)
    sigmas = cfg_mod._get(cfg, "ablation.sigmas", list, [0.05, 0.2, 0.5])
    seeds = cfg_mod._get(cfg, "ablation.seeds", list, [0, 1, 2])
    n_train = cfg_mod._positive(cfg, "ablation.train_count", int, 200)
    n_test = cfg_mod._positive(cfg, "ablation.test_count", int, 50)
    base_seed = args.seed if args.seed is not None else 0

    records = []
    for sigma in sigmas:
        prob_s = dataclasses.replace(problem, sigma=float(sigma))
        train_ds = generate_dataset(prob_s, n_train,
                                    derive_seed(base_seed, 301, int(sigma * 1e6)),
                                    sampler, threads=args.threads)
        test_ds = generate_dataset(prob_s, n_test,
                                   derive_seed(base_seed, 303, int(sigma * 1e6)),
                                   sampler, split="test", threads=args.threads)
        for use_features in (True, False):
            for seed in seeds:
                run_cfg = dataclasses.replace(sur_cfg, use_features=use_features,
                                              seed=int(seed))
                run_train = dataclasses.replace(train_cfg, seed=int(seed))
                model = SurrogateModel(prob_s, run_cfg)
                train(model, train_ds, run_train, threads=args.threads)
                report = evaluate_model(model, test_ds, threads=args.threads)
                records.append({
                    "sigma": float(sigma), "model": run_cfg.name(),
                    "seed": int(seed), "u1_onestep": report.u1_onestep,
                    "prediction": report.prediction,
                })
    return records
