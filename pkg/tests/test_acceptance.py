"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Artifacts shared between criteria (desk-scale datasets, the trained model
grid, the trained policy, control evaluations) are built once per session by
fixtures; every seed is fixed, so the whole gate is reproducible.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import central_diff_check
from spdectl.bench import (
    BenchEntry, evaluate_open_loop, evaluate_policy, evaluate_zero_control,
    make_tasks, task_sampler_from_dataset,
)
from spdectl.control import PolicyConfig, PolicyNet, train_policy
from spdectl.grid import Grid, Propagator, derivative_1d_matrix, laplacian_1d
from spdectl.noise import sample_white_noise, smooth
from spdectl.regfeat import COMBINED, SPLIT, FeatureSpec, enumerate_terms, \
    evaluate, term_key
from spdectl.rng import generator
from spdectl.solver import generate_dataset, ns_problem, rd_problem, \
    sample_forcing, sample_state, simulate, step_rd
from spdectl.surrogate import (
    SurrogateConfig, SurrogateModel, TrainConfig, evaluate_model, train,
)
from spdectl.tensor import Tensor

from test_regfeat import brute_force_feature_sets, brute_key, normalize_brute_term

# ---------------------------------------------------------------- desk scale

TRAIN_TRAJECTORIES = 500
TEST_TRAJECTORIES = 100
SEEDS = (0, 1, 2)

CONV_TRAIN = TrainConfig(lr=1e-3, batch_size=64, epochs=20)
SPECTRAL_TRAIN = TrainConfig(lr=1e-2, batch_size=25, epochs=20)

POLICY_CFG = PolicyConfig(hidden=(512, 256), lr=1e-3, batch_tasks=8, n_noise=2,
                          iterations=250, alpha=0.01, seed=0)
TASK_COUNT = 50
TASK_ALPHA = 0.01
TASK_NOISE_SAMPLES = 4          # per-task noise draws inside the optimizers
OPEN_LOOP_ITERS = 100                   # per sweep point
OPEN_LOOP_LR = (0.02, 0.05, 0.15)       # the 3-point step-size sweep


def report(num, name, ok, detail):
    line = f"ACCEPTANCE {num:02d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def rd_desk():
    return rd_problem()


@pytest.fixture(scope="session")
def desk_train(rd_desk):
    return generate_dataset(rd_desk, TRAIN_TRAJECTORIES, seed0=101, threads=2)


@pytest.fixture(scope="session")
def desk_test(rd_desk):
    return generate_dataset(rd_desk, TEST_TRAJECTORIES, seed0=901,
                            split="test", threads=2)


def _train_variant(problem, dataset, backbone, use_features, seed):
    if backbone == "conv":
        cfg = SurrogateConfig(backbone="conv", use_features=use_features,
                              channels=32, layers=3, seed=seed)
        tc = TrainConfig(**{**CONV_TRAIN.__dict__, "seed": seed})
    else:
        cfg = SurrogateConfig(backbone="spectral", use_features=use_features,
                              channels=16, layers=2, modes=12, seed=seed)
        tc = TrainConfig(**{**SPECTRAL_TRAIN.__dict__, "seed": seed})
    model = SurrogateModel(problem, cfg)
    train(model, dataset, tc, threads=2)
    return model


@pytest.fixture(scope="session")
def table1_runs(rd_desk, desk_train, desk_test):
    """(backbone, use_features, seed) -> (model, report); timed for criterion 6."""
    t0 = time.perf_counter()
    runs = {}
    for backbone in ("conv", "spectral"):
        for use_features in (True, False):
            for seed in SEEDS:
                model = _train_variant(rd_desk, desk_train, backbone,
                                       use_features, seed)
                rep = evaluate_model(model, desk_test, threads=2)
                runs[(backbone, use_features, seed)] = (model, rep)
    runs["elapsed"] = time.perf_counter() - t0
    return runs


@pytest.fixture(scope="session")
def rf_conv_model(table1_runs):
    return table1_runs[("conv", True, 0)][0]


@pytest.fixture(scope="session")
def trained_policy(rd_desk, desk_train, rf_conv_model):
    policy = PolicyNet(rd_desk, hidden=POLICY_CFG.hidden, seed=POLICY_CFG.seed)
    result = train_policy(policy, rf_conv_model,
                          task_sampler_from_dataset(desk_train), POLICY_CFG)
    return policy, result


@pytest.fixture(scope="session")
def control_rows(rd_desk, desk_train, rf_conv_model, trained_policy):
    """Zero / open-loop / policy rows at sigma = 0.05 and sigma = 1."""
    policy, train_result = trained_policy
    entry = BenchEntry(name="rf-conv", surrogate=rf_conv_model, policy=policy)
    t0 = time.perf_counter()
    rows = {}
    for tag, sigma, task_seed in (("base", rd_desk.sigma, 11), ("sigma1", 1.0, 11)):
        tasks = make_tasks(desk_train, count=TASK_COUNT, seed=task_seed,
                           alpha=TASK_ALPHA, n_noise=TASK_NOISE_SAMPLES,
                           sigma=sigma)
        rows[(tag, "zero")] = evaluate_zero_control(rd_desk, tasks)
        rows[(tag, "open-loop")] = evaluate_open_loop(
            entry, rd_desk, tasks, iterations=OPEN_LOOP_ITERS, lr=OPEN_LOOP_LR,
            seed=5)
        rows[(tag, "policy")] = evaluate_policy(entry, rd_desk, tasks)
    rows["elapsed"] = time.perf_counter() - t0 + train_result.seconds
    return rows


# ---------------------------------------------------------------- criteria


def test_criterion_01_feature_oracle():
    t0 = time.perf_counter()
    grid = Grid(dim=1, n=8, frames=3, fine_per_frame=1)
    op = laplacian_1d(8, grid.eps).scaled(0.1)
    prop = Propagator(op, grid.dt_coarse)
    pin_vec = np.ones(8)
    pin_vec[0] = pin_vec[-1] = 0.0
    lap = op.matrix() * np.outer(pin_vec, pin_vec)
    pmat = np.linalg.inv(np.eye(8) - grid.dt_coarse * lap)
    dmat = derivative_1d_matrix(8, grid.eps)
    rng = np.random.default_rng(42)
    worst = 0.0
    checked = 0
    for mode in (COMBINED, SPLIT):
        for n, m, l in itertools.product((1, 2), repeat=3):
            spec = FeatureSpec(n=n, m=m, l=l, forcing_mode=mode, cap=2048)
            u0 = rng.standard_normal(8)
            leaves = {name: [rng.standard_normal(8) for _ in range(2)]
                      for name in spec.leaf_names()}
            fs = evaluate(spec, u0, leaves, prop, grid, 2)
            brute = brute_force_feature_sets(spec, u0, leaves, pmat, pin_vec,
                                             dmat, grid.dt_coarse, 2)
            grouped = {}
            for term, series in brute:
                grouped.setdefault(brute_key(normalize_brute_term(term)),
                                   []).append(series)
            assert {term_key(t) for t in fs.terms} == set(grouped)
            for term in fs.terms:
                for series in grouped[term_key(term)]:
                    for k in range(3):
                        worst = max(worst, np.abs(
                            series[k] - fs.fields[term][k]).max())
                        checked += 1
    elapsed = time.perf_counter() - t0
    report(1, "feature-oracle", worst < 1e-12 and elapsed < 10.0,
           f"max dev {worst:.2e} over {checked} fields, {elapsed:.1f}s")


def test_criterion_02_mild_solution_identity():
    t0 = time.perf_counter()
    sigma = 0.3
    worst_ratio = 0.0
    for i in range(20):
        p = rd_problem(mu_kind="none", noise_kind="additive", sigma=sigma)
        gen = generator(700, i)
        u0 = sample_state(p.grid, gen)
        forcing = sample_forcing(p.grid, generator(701, i))
        traj = simulate(p, u0, forcing, seed=702 + i)
        spec = FeatureSpec(n=1, m=1, l=1, forcing_mode=SPLIT)
        fpf = p.grid.fine_per_frame
        f_series = [forcing[j // fpf] for j in range(p.grid.fine_steps)]
        xi_series = list(traj.noise)
        frames = list(range(0, p.grid.fine_steps + 1, fpf))
        fs = evaluate(spec, u0, {"f": f_series, "xi": xi_series},
                      p.propagator, p.grid, p.grid.fine_steps,
                      sample_steps=frames)
        by_key = {term_key(t): t for t in fs.terms}
        combo = np.stack([
            fs.fields[by_key["s"]][k] + fs.fields[by_key["I(f)"]][k]
            + sigma * fs.fields[by_key["I(xi)"]][k]
            for k in range(p.grid.frames)])
        err_feature = np.linalg.norm(combo - traj.states)
        # solver self-convergence: re-integrate the same noise path at half dt
        u_half = np.array(p.grid.pin(u0))
        p_half = rd_problem(mu_kind="none", noise_kind="additive", sigma=sigma,
                            fine_per_frame=2 * fpf)
        for step in range(p.grid.fine_steps):
            f_slice = forcing[step // fpf]
            for _ in range(2):
                u_half = step_rd(p_half, u_half, f_slice, traj.noise[step])
        err_conv = np.linalg.norm(traj.states[-1] - u_half)
        worst_ratio = max(worst_ratio, err_feature / (2.0 * err_conv))
    elapsed = time.perf_counter() - t0
    report(2, "mild-solution-identity", worst_ratio < 1.0 and elapsed < 30.0,
           f"worst err/(2*conv) = {worst_ratio:.2e}, {elapsed:.1f}s")


def test_criterion_03_solver_analytics():
    p = rd_problem(mu_kind="none", noise_kind="none")
    u0 = np.sin(np.pi * p.grid.coords())
    traj = simulate(p, u0, np.zeros((10, 64)), seed=1)
    rd_err = abs(traj.states[-1][32] / (np.exp(-p.nu * np.pi ** 2) * u0[32]) - 1)

    pn = ns_problem(noise_kind="none", fine_per_frame=100)
    xx, _ = pn.grid.coords()
    w0 = np.sin(2 * np.pi * xx)
    tn = simulate(pn, w0, np.zeros((10, 40, 40)), seed=2)
    ns_err = abs(tn.states[-1][10, 0] / (np.exp(-pn.nu * 4 * np.pi ** 2)
                                         * w0[10, 0]) - 1)

    from spdectl.solver import ns_velocity
    w = np.random.default_rng(3).standard_normal((40, 40))
    w -= w.mean()
    ux, uy = ns_velocity(w)
    k1 = np.fft.fftfreq(40, 1 / 40)[:, None]
    k2 = np.arange(21)[None, :]
    div = np.fft.irfft2(2j * np.pi * (k1 * np.fft.rfft2(ux)
                                      + k2 * np.fft.rfft2(uy)), s=(40, 40))
    div_max = np.abs(div).max()
    ok = rd_err < 1e-2 and ns_err < 1e-3 and div_max < 1e-10
    report(3, "solver-analytics", ok,
           f"rd decay {rd_err:.2e} (<1e-2), ns decay {ns_err:.2e} (<1e-3), "
           f"div {div_max:.2e} (<1e-10)")


def test_criterion_04_gradient_suite():
    from spdectl.tensor import concat, conv1d, conv2d, spectral_multiply, \
        spectral_multiply_2d, stack
    rng = np.random.default_rng(9)
    worst = {}

    def check(name, make_loss, tensors):
        worst[name] = central_diff_check(make_loss, tensors, n_probes=max(
            3, int(np.ceil(20 / max(1, len(tensors))))), seed=1)

    a = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 1.5, (5,)), requires_grad=True)
    check("elementwise", lambda: ((a * b + a / b - b).tanh() ** 2).sum(), [a, b])
    c = Tensor(rng.uniform(0.2, 1.5, (24,)), requires_grad=True)
    check("unary", lambda: (c.sqrt() + c.exp() * 0.1 + c.relu() + c ** 3).sum(), [c])
    m1 = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    m2 = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    check("matmul", lambda: ((m1 @ m2) ** 2).sum(), [m1, m2])
    sh = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    check("shape-ops", lambda: (concat([sh[:, :4], sh[:, 4:]], axis=1)
                                .reshape(3, 2, 4).sum(axis=2) ** 2).sum()
          + (stack([sh, sh], axis=0)[1] ** 2).sum(), [sh])
    x1 = Tensor(rng.standard_normal((2, 3, 10)), requires_grad=True)
    w1 = Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
    check("conv1d", lambda: (conv1d(x1, w1, padding="periodic") ** 2).sum(),
          [x1, w1])
    x2 = Tensor(rng.standard_normal((2, 2, 6, 6)), requires_grad=True)
    w2 = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    check("conv2d", lambda: (conv2d(x2, w2, padding="zero") ** 2).sum(), [x2, w2])
    xs = Tensor(rng.standard_normal((2, 2, 16)), requires_grad=True)
    wr = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    wi = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    check("spectral1d", lambda: (spectral_multiply(xs, wr, wi, 5) ** 2).sum(),
          [xs, wr, wi])
    xs2 = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    wr2 = Tensor(rng.standard_normal((2, 2, 2, 3, 3)), requires_grad=True)
    wi2 = Tensor(rng.standard_normal((2, 2, 2, 3, 3)), requires_grad=True)
    check("spectral2d", lambda: (spectral_multiply_2d(xs2, wr2, wi2, (3, 3)) ** 2)
          .sum(), [xs2, wr2, wi2])

    problem = rd_problem(n=12, frames=3, fine_per_frame=2)
    op = problem.operator
    prop = problem.propagator
    fld = Tensor(rng.standard_normal((2, 12)), requires_grad=True)
    check("operator-apply", lambda: (op.apply(fld) ** 2).sum() * 1e-4, [fld])
    check("propagator-solve", lambda: (prop.solve(fld) ** 2).sum(), [fld])
    from spdectl.regfeat import spatial_derivative
    check("spatial-derivative",
          lambda: (spatial_derivative(fld, problem.grid) ** 2).sum() * 1e-2, [fld])

    # full surrogate training loss
    from spdectl.surrogate import _batch_heads, _component_losses, \
        _weighted_loss, extract_pairs, precompute_features
    dataset = generate_dataset(problem, 6, seed0=13)
    model = SurrogateModel(problem, SurrogateConfig(backbone="conv", channels=6,
                                                    layers=2, seed=3))
    samples = extract_pairs(dataset)
    samples.features = precompute_features(model, samples)
    idx = np.arange(6)
    tc = TrainConfig()
    check("surrogate-loss", lambda: _weighted_loss(tc, *_component_losses(
        model, samples, idx, _batch_heads(model, samples, idx))), model.params())

    # full policy (expected-tracking) loss through the frozen surrogate
    from spdectl.control import _rollout_with_policy, _tracking_norms, frozen
    policy = PolicyNet(problem, hidden=(10, 8), seed=4)
    policy.layers[-1].weight.data = 0.1 * generator(5).standard_normal(
        policy.layers[-1].weight.shape)
    u0 = np.stack([sample_state(problem.grid, generator(6, i)) for i in range(2)])
    target = np.stack([sample_state(problem.grid, generator(7, i))
                       for i in range(2)])
    xi = problem.sigma * np.stack(
        [smooth(sample_white_noise(problem.grid, 800 + i), problem.grid).values
         for i in range(2)])

    def policy_loss():
        with frozen(model.params()):
            states, actions = _rollout_with_policy(policy, model, u0,
                                                   Tensor(target), xi)
            track, energy = _tracking_norms(problem.grid, states, Tensor(target),
                                            actions, 0.01)
            return (track + energy).mean()

    check("policy-loss", policy_loss, policy.params())

    worst_all = max(worst.values())
    report(4, "gradient-suite", worst_all < 1e-4,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_criterion_05_noise_statistics():
    grid = Grid(dim=1, n=8, frames=2, fine_per_frame=2)
    vals = np.stack([sample_white_noise(grid, 80_000 + i).values
                     for i in range(10_000)])
    target = 1.0 / (grid.dt_fine * grid.eps)
    var_dev = abs(vals.var(axis=0).mean() / target - 1.0)

    g2 = Grid(dim=2, n=6, bc="periodic", frames=2, fine_per_frame=1)
    vals2 = np.stack([sample_white_noise(g2, 120_000 + i).values
                      for i in range(10_000)])
    target2 = 1.0 / (g2.dt_fine * g2.eps ** 2)
    var_dev2 = abs(vals2.var(axis=0).mean() / target2 - 1.0)

    f1 = sample_white_noise(grid, 7)
    f2 = sample_white_noise(grid, 8)
    combo = type(f1)(values=1.7 * f1.values - 0.4 * f2.values, seed=0)
    lin_dev = np.abs(
        smooth(combo, grid, 3).values
        - (1.7 * smooth(f1, grid, 3).values - 0.4 * smooth(f2, grid, 3).values)
    ).max()
    ok = var_dev < 0.05 and var_dev2 < 0.05 and lin_dev < 1e-12
    report(5, "noise-statistics", ok,
           f"var dev 1d {var_dev:.3f}, 2d {var_dev2:.3f} (<0.05), "
           f"linearity {lin_dev:.1e}")


def test_criterion_06_model_ordering(table1_runs):
    details = []
    ok = True
    for backbone in ("conv", "spectral"):
        rf = np.median([table1_runs[(backbone, True, s)][1].u1_onestep
                        for s in SEEDS])
        plain = np.median([table1_runs[(backbone, False, s)][1].u1_onestep
                           for s in SEEDS])
        ok &= rf <= plain
        details.append(f"{backbone}: rf {rf:.4f} <= plain {plain:.4f}")
    elapsed = table1_runs["elapsed"]
    ok &= elapsed < 1800
    report(6, "table1-ordering", ok,
           "; ".join(details) + f"; {elapsed:.0f}s (<1800)")


def test_criterion_07_control_effectiveness(control_rows):
    e_zero = control_rows[("base", "zero")].report.e
    e_open = control_rows[("base", "open-loop")].report.e
    e_policy = control_rows[("base", "policy")].report.e
    elapsed = control_rows["elapsed"]
    ok = (e_policy <= 0.5 * e_zero) and (e_policy <= 1.1 * e_open) \
        and elapsed < 1800
    report(7, "control-effectiveness", ok,
           f"policy {e_policy:.4f} vs zero {e_zero:.4f} (need <=0.5x) "
           f"and open-loop {e_open:.4f} (need <=1.1x); {elapsed:.0f}s")


def test_criterion_08_timing_ordering(control_rows):
    t_policy = control_rows[("base", "policy")].mean_seconds
    t_open = control_rows[("base", "open-loop")].mean_seconds
    ok = t_policy <= 0.1 * t_open
    report(8, "timing-ordering", ok,
           f"policy {t_policy * 1e3:.2f} ms vs open-loop {t_open:.2f} s per task")


def test_criterion_09_noise_robustness(control_rows):
    open_base = control_rows[("base", "open-loop")].report.e
    open_high = control_rows[("sigma1", "open-loop")].report.e
    pol_base = control_rows[("base", "policy")].report.e
    pol_high = control_rows[("sigma1", "policy")].report.e
    deg_open = open_high - open_base
    deg_policy = pol_high - pol_base
    ok = deg_policy < deg_open
    report(9, "noise-robustness", ok,
           f"closed-loop degradation {deg_policy:+.4f} < open-loop {deg_open:+.4f} "
           f"(policy {pol_base:.4f}->{pol_high:.4f}, "
           f"open {open_base:.4f}->{open_high:.4f})")


def test_criterion_10_noise_scale_trend():
    sigmas = (0.05, 0.2, 0.5)
    errors = {True: [], False: []}
    for sigma in sigmas:
        p = rd_problem(sigma=sigma)
        train_ds = generate_dataset(p, 200, seed0=401, threads=2)
        test_ds = generate_dataset(p, 50, seed0=997, split="test", threads=2)
        for use_features in (True, False):
            per_seed = []
            for seed in SEEDS:
                cfg = SurrogateConfig(backbone="spectral",
                                      use_features=use_features,
                                      channels=16, layers=2, modes=12, seed=seed)
                model = SurrogateModel(p, cfg)
                train(model, train_ds,
                      TrainConfig(**{**SPECTRAL_TRAIN.__dict__, "epochs": 12,
                                     "seed": seed}), threads=2)
                per_seed.append(evaluate_model(model, test_ds,
                                               threads=2).u1_onestep)
            errors[use_features].append(float(np.median(per_seed)))
    slope = {k: np.polyfit(sigmas, v, 1)[0] for k, v in errors.items()}
    ok = slope[False] > slope[True]
    report(10, "noise-scale-trend", ok,
           f"plain slope {slope[False]:.4f} > rf slope {slope[True]:.4f}; "
           f"rf errors {errors[True]}, plain {errors[False]}")


def test_criterion_11_determinism(rd_desk, tmp_path):
    from spdectl import storage
    from spdectl.bench import metric_records, write_csv, METRIC_COLUMNS

    # dataset stage: serial vs parallel, byte-identical containers
    small = rd_problem(n=16, frames=3, fine_per_frame=2)
    d1 = generate_dataset(small, 4, seed0=3, threads=1)
    d2 = generate_dataset(small, 4, seed0=3, threads=3)
    storage.write_dataset(d1, tmp_path / "a.spdd")
    storage.write_dataset(d2, tmp_path / "b.spdd")
    data_ok = (tmp_path / "a.spdd").read_bytes() == (tmp_path / "b.spdd").read_bytes()

    # training stage (feature precompute included), serial vs threaded
    def train_once(threads):
        model = SurrogateModel(small, SurrogateConfig(backbone="conv", channels=6,
                                                      layers=2, seed=1))
        res = train(model, d1, TrainConfig(lr=1e-3, batch_size=8, epochs=3,
                                           seed=2), threads=threads)
        return res.epoch_losses

    train_ok = train_once(1) == train_once(3)

    # policy stage
    model = SurrogateModel(small, SurrogateConfig(backbone="conv", channels=6,
                                                  layers=2, seed=1))
    train(model, d1, TrainConfig(lr=1e-3, batch_size=8, epochs=2, seed=2))

    def policy_once():
        cfg = PolicyConfig(hidden=(12, 8), lr=1e-3, batch_tasks=2, n_noise=1,
                           iterations=3, alpha=0.01, seed=6)
        pol = PolicyNet(small, hidden=cfg.hidden, seed=6)
        return train_policy(pol, model, task_sampler_from_dataset(d1), cfg).losses

    policy_ok = policy_once() == policy_once()

    # benchmark stage: identical metric CSV bytes across repeats
    tasks = make_tasks(d1, count=2, seed=4, n_noise=1)
    def bench_bytes(path):
        rows = [evaluate_zero_control(small, tasks)]
        rows.append(evaluate_open_loop(BenchEntry("m", model), small, tasks,
                                       iterations=5, lr=0.05, seed=1))
        write_csv(path, metric_records(rows), METRIC_COLUMNS)
        return path.read_bytes()

    bench_ok = bench_bytes(tmp_path / "m1.csv") == bench_bytes(tmp_path / "m2.csv")

    ok = data_ok and train_ok and policy_ok and bench_ok
    report(11, "determinism", ok,
           f"dataset {data_ok}, training {train_ok}, policy {policy_ok}, "
           f"benchmark {bench_ok}")