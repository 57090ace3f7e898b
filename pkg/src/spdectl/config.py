"""JSON run configurations: schema validation and constructors.

Every CLI subcommand reads one JSON file.  Validation is hand-rolled so
errors carry the offending key path (``train.epochs: expected int > 0``);
schema violations exit with code 2, runtime failures with 1 (see cli).
"""

from __future__ import annotations

import json

from .control import PolicyConfig
from .solver import SamplerConfig, SPDEProblem, ns_problem, rd_problem
from .surrogate import SurrogateConfig, TrainConfig


class ConfigError(ValueError):
    """Schema violation; message carries the JSON key path."""


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc


def _get(cfg: dict, path: str, expected, default=..., where: str = ""):
    parts = path.split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            if default is not ...:
                return default
            raise ConfigError(f"{where}{path}: required key missing")
        node = node[part]
    if expected is float and isinstance(node, int) and not isinstance(node, bool):
        node = float(node)
    if expected is not None and not isinstance(node, expected):
        name = expected.__name__ if isinstance(expected, type) else str(expected)
        raise ConfigError(f"{where}{path}: expected {name}, got {type(node).__name__}")
    return node


def _positive(cfg, path, expected, default=..., where=""):
    value = _get(cfg, path, expected, default, where)
    if value is not None and value <= 0:
        raise ConfigError(f"{where}{path}: must be positive, got {value}")
    return value


def problem_from_config(cfg: dict, where: str = "") -> SPDEProblem:
    kind = _get(cfg, "problem.kind", str, "reaction-diffusion", where)
    common = dict(
        frames=_positive(cfg, "problem.frames", int, 11, where),
        fine_per_frame=_positive(cfg, "problem.fine_per_frame", int, 20, where),
        sigma=_get(cfg, "problem.sigma", float, None, where),
        nu=_positive(cfg, "problem.nu", float, None, where),
        noise_window=_positive(cfg, "problem.noise_window", int, 3, where),
    )
    common = {k: v for k, v in common.items() if v is not None}
    if kind == "reaction-diffusion":
        n = _positive(cfg, "problem.n", int, 64, where)
        mu_kind = _get(cfg, "problem.mu_kind", str, "cubic", where)
        noise_kind = _get(cfg, "problem.noise_kind", str, "multiplicative", where)
        return rd_problem(n=n, mu_kind=mu_kind, noise_kind=noise_kind, **common)
    if kind == "navier-stokes":
        n = _positive(cfg, "problem.n", int, 40, where)
        return ns_problem(n=n, **common)
    raise ConfigError(f"{where}problem.kind: unknown kind {kind!r}")


def sampler_from_config(cfg: dict, where: str = "") -> SamplerConfig:
    return SamplerConfig(
        k_max=_positive(cfg, "sampler.k_max", int, 8, where),
        ic_amp=_positive(cfg, "sampler.ic_amp", float, 1.0, where),
        forcing_amp=_positive(cfg, "sampler.forcing_amp", float, 1.0, where),
    )


def surrogate_from_config(cfg: dict, where: str = "") -> SurrogateConfig:
    backbone = _get(cfg, "surrogate.backbone", str, "conv", where)
    if backbone not in ("conv", "spectral", "none"):
        raise ConfigError(f"{where}surrogate.backbone: unknown backbone {backbone!r}")
    return SurrogateConfig(
        backbone=backbone,
        use_features=_get(cfg, "surrogate.use_features", bool, True, where),
        channels=_positive(cfg, "surrogate.channels", int, 32, where),
        layers=_positive(cfg, "surrogate.layers", int, 3, where),
        modes=_positive(cfg, "surrogate.modes", int, 12, where),
        feature_n=_get(cfg, "surrogate.feature_n", int, 1, where),
        feature_m=_get(cfg, "surrogate.feature_m", int, 2, where),
        feature_l=_get(cfg, "surrogate.feature_l", int, 2, where),
        seed=_get(cfg, "surrogate.seed", int, 0, where),
    )


def train_from_config(cfg: dict, where: str = "") -> TrainConfig:
    return TrainConfig(
        lr=_positive(cfg, "train.lr", float, 1e-3, where),
        batch_size=_positive(cfg, "train.batch_size", int, 64, where),
        epochs=_positive(cfg, "train.epochs", int, 60, where),
        seed=_get(cfg, "train.seed", int, 0, where),
        warmup_frac=_get(cfg, "train.warmup_frac", float, 0.2, where),
        difficulty_q=_get(cfg, "train.difficulty_q", float, 0.8, where),
        dup_factor=_get(cfg, "train.dup_factor", int, 1, where),
        w_transition=_positive(cfg, "train.w_transition", float, 1.0, where),
        w_recon=_get(cfg, "train.w_recon", float, 0.5, where),
    )


def policy_from_config(cfg: dict, where: str = "") -> PolicyConfig:
    hidden = _get(cfg, "policy.hidden", list, [2048, 1024, 1024], where)
    if not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError(f"{where}policy.hidden: expected a list of positive ints")
    return PolicyConfig(
        hidden=tuple(hidden),
        lr=_positive(cfg, "policy.lr", float, 5e-4, where),
        batch_tasks=_positive(cfg, "policy.batch_tasks", int, 16, where),
        n_noise=_positive(cfg, "policy.n_noise", int, 8, where),
        iterations=_positive(cfg, "policy.iterations", int, 200, where),
        alpha=_positive(cfg, "policy.alpha", float, 0.01, where),
        seed=_get(cfg, "policy.seed", int, 0, where),
    )


def dataset_section(cfg: dict, where: str = "") -> dict:
    return {
        "count": _positive(cfg, "dataset.count", int, ..., where),
        "seed": _get(cfg, "dataset.seed", int, 0, where),
        "split": _get(cfg, "dataset.split", str, "train", where),
    }


def bench_section(cfg: dict, where: str = "") -> dict:
    return {
        "tasks": _positive(cfg, "bench.tasks", int, 50, where),
        "seed": _get(cfg, "bench.seed", int, 0, where),
        "alpha": _positive(cfg, "bench.alpha", float, 0.01, where),
        "n_noise": _positive(cfg, "bench.n_noise", int, 50, where),
        "jitter": _get(cfg, "bench.jitter", float, 0.05, where),
        "sigma": _get(cfg, "bench.sigma", float, None, where),
        "open_loop_iterations": _positive(cfg, "bench.open_loop_iterations", int,
                                          150, where),
        "open_loop_lr": _lr_sweep(cfg, "bench.open_loop_lr", where),
    }


def _lr_sweep(cfg, path, where=""):
    value = _get(cfg, path, None, [0.02, 0.05, 0.15], where)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [float(value)]
    if not (isinstance(value, list) and value
            and all(isinstance(v, (int, float)) and v > 0 for v in value)):
        raise ConfigError(f"{where}{path}: expected a positive number or list")
    return [float(v) for v in value]
