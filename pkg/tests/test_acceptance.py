"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line through the ``criterion`` fixture;
the lines are repeated in the pytest terminal summary. The training runs are
shared through session fixtures, so the whole file takes roughly 45 minutes
on one core. Deselect with ``-m "not slow"``.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from lipfield import cli
from lipfield.evaluation import empirical_lipschitz, grad_check, marching_squares
from lipfield.experiments import (DIRICHLET_EPOCHS, depth_config, interp_config, interp_shapes,
                                  partial_completion, run_autoencoder_attack, smoothness_report,
                                  synthetic_digits, raster_dataset, toy_fit)
from lipfield.fields import Circle, IdxParseError, grid_points, parse_idx, write_idx
from lipfield.lipreg import RegularizerSpec, normalize_row_inf, regularizer
from lipfield.net import Activation, MlpParams, init_params, predict
from lipfield.optim import train
from lipfield.tensor import make_rng, matrix_norm, softplus_inv

SEEDS = range(5)
OUT = Path(os.environ.get("LIPFIELD_ACCEPTANCE_OUT", Path(__file__).parent.parent / "acceptance_output"))


def at_least(flags, k=4):
    return sum(bool(f) for f in flags) >= k


def flags_str(flags):
    return "".join("+" if f else "-" for f in flags)


# ------------------------------------------------------------------ shared training runs

@pytest.fixture(scope="session")
def interp_models():
    """Circle/star models for both modes and all seeds, plus the total wall time."""
    t0 = time.perf_counter()
    models = {}
    for seed in SEEDS:
        for mode in ("vanilla", "lipschitz"):
            models[mode, seed] = train(interp_config(mode, seed))[0]
    return models, time.perf_counter() - t0


@pytest.fixture(scope="session")
def interp_reports(interp_models):
    models, _ = interp_models
    return {key: smoothness_report(p, interp_shapes()) for key, p in models.items()}


@pytest.fixture(scope="session")
def autoencoder_runs():
    t0 = time.perf_counter()
    runs = {(lip, s): run_autoencoder_attack(lip, s) for s in SEEDS for lip in (False, True)}
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def depth_runs():
    out = {}
    for seed in SEEDS:
        for variant in ("lipschitz_product", "yoshida_sq_sum"):
            for depth in (5, 10):
                p, log = train(depth_config(depth, variant, seed))
                out[variant, depth, seed] = (p, log.rows[-1]["bound"])
    return out


# ------------------------------------------------------------------ 1

ACTIVATIONS = [Activation("relu"), Activation("leaky_relu", 0.1), Activation("tanh"),
               Activation("sigmoid"), Activation("fullsort"), Activation("identity")]


def random_architecture(i):
    rng = make_rng(1000 + i)
    act = ACTIVATIONS[i % len(ACTIVATIONS)]
    mode = (i // len(ACTIVATIONS)) % 2 == 0
    widths = [int(w) for w in rng.integers(2, 7, size=int(rng.integers(1, 4)))]
    d, k = int(rng.integers(0, 3)), int(rng.integers(1, 3))
    out = "sigmoid" if i % 5 == 4 else "identity"
    kscale = not mode and i % 7 == 3
    p = init_params([d + k, *widths, 1], act, mode, seed=i, input_scale=float(rng.choice([1, 3])),
                    spatial_dim=d, output_activation=out, kscale=kscale)
    # random biases and bounds so that some rows clip and others do not
    arrays = [a + 0.3 * rng.standard_normal(a.shape) if a.ndim == 1 else a for a in p.arrays()]
    return p.with_arrays(arrays)


def test_criterion_01_gradient_correctness(criterion):
    t0 = time.perf_counter()
    results = [grad_check(random_architecture(i), seed=i, h=1e-5) for i in range(24)]
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    modes = {random_architecture(i).lipschitz_mode for i in range(24)}
    ok = worst < 1e-4 and elapsed < 60 and modes == {True, False}
    criterion(1, ok, f"24 architectures, max rel error {worst:.2e}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3, 4

def test_criterion_03_norm_inequalities(criterion):
    rng = make_rng(3)
    bad = 0
    slack = 1 + 1e-9
    for _ in range(1000):
        m, n = rng.integers(1, 65, size=2)
        a = rng.standard_normal((m, n)) * 10.0 ** rng.uniform(-3, 3)
        two, inf, one = (matrix_norm(a, k) for k in ("spectral", "inf", "one"))
        ok = (inf / np.sqrt(n) <= two * slack and two <= np.sqrt(m) * inf * slack
              and one / np.sqrt(m) <= two * slack and two <= np.sqrt(n) * one * slack)
        bad += not ok
    criterion(3, bad == 0, f"1000 matrices, {bad} violations")
    assert bad == 0


def test_criterion_04_normalization(criterion):
    example = normalize_row_inf([[3.0, -1.0], [0.5, 0.25]], 2.0)
    exact = np.array_equal(example, [[1.5, -0.5], [0.5, 0.25]])
    rng = make_rng(4)
    bad = 0
    for _ in range(1000):
        w = rng.standard_normal(tuple(rng.integers(1, 17, size=2))) * rng.uniform(0.01, 10)
        c = float(rng.uniform(0.01, 10))
        once = normalize_row_inf(w, c)
        bad += not np.array_equal(normalize_row_inf(once, c), once)
        keep = np.abs(w).sum(axis=1) <= c
        bad += not np.array_equal(once[keep], w[keep])
        big = float(np.abs(w).sum(axis=1).max())
        bad += not np.array_equal(normalize_row_inf(w, big), w)
    ok = exact and bad == 0
    criterion(4, ok, f"worked example exact={exact}, {bad} failures over 1000 random (W, c)")
    assert ok


# ------------------------------------------------------------------ 5

@pytest.mark.slow
def test_criterion_05_interpolation_smoothness(criterion, interp_models, interp_reports):
    _, elapsed = interp_models
    fits, wins = [], []
    for s in SEEDS:
        van, lip = interp_reports["vanilla", s], interp_reports["lipschitz", s]
        fits.append(max(van.fit_mse + lip.fit_mse) < 1e-4)
        wins.append(van.jac_max >= 2.0 * lip.jac_max)
    ratios = [interp_reports["vanilla", s].jac_max / interp_reports["lipschitz", s].jac_max
              for s in SEEDS]
    ok = all(fits) and at_least(wins) and elapsed <= 600
    criterion(5, ok, f"fit {flags_str(fits)}, jac-max ratio {np.round(ratios, 1).tolist()}, "
                     f"training {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 6

@pytest.mark.slow
def test_criterion_06_dirichlet_failure_mode(criterion, interp_reports):
    OUT.mkdir(parents=True, exist_ok=True)
    rows, wins, pairs = [], [], []
    for s in SEEDS:
        p = train(interp_config("dirichlet", s, epochs=DIRICHLET_EPOCHS))[0]
        d = smoothness_report(p, interp_shapes())
        lip = interp_reports["lipschitz", s]
        wins.append(d.peak_ratio > lip.peak_ratio)
        pairs.append((round(d.peak_ratio, 2), round(lip.peak_ratio, 2)))
        for name, rep in (("dirichlet", d), ("lipschitz", lip)):
            rows += [[s, name, t, v] for t, v in zip(rep.ts, rep.profile)]
    cli.write_csv(OUT / "dirichlet_profiles.csv", ["seed", "model", "t", "jacobian_norm_sq"], rows)
    ok = at_least(wins)
    criterion(6, ok, f"max/mean (dirichlet, lipschitz) {pairs}, profiles in {OUT.name}/")
    assert ok


# ------------------------------------------------------------------ 7

@pytest.mark.slow
def test_criterion_07_fgsm_robustness(criterion, autoencoder_runs):
    runs, elapsed = autoencoder_runs
    ratios, wins = [], []
    for s in SEEDS:
        van, lip = runs[False, s][0], runs[True, s][0]
        ratios.append(lip.mean_abs_delta / van.mean_abs_delta)
        # a decoder that ignores its code is trivially robust; do not count that as a win
        wins.append(ratios[-1] <= 0.7 and lip.recon_mse <= 3.0 * van.recon_mse)
    ok = at_least(wins) and elapsed <= 1200
    criterion(7, ok, f"lipschitz/vanilla mean delta {np.round(ratios, 2).tolist()} "
                     f"({flags_str(wins)}), {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 8, 9

@pytest.mark.slow
def test_criterion_08_toy_latent_fit(criterion, interp_models):
    models, _ = interp_models
    lip_ok = {"adam": [], "sgd": []}
    cmp_ok = []
    for s in SEEDS:
        for opt in lip_ok:
            fit = toy_fit(models["lipschitz", s], s, optimizer=opt)
            lip_ok[opt].append(fit.final_loss < 1e-3 and abs(float(fit.t_star[0]) - 1.0) < 0.1)
            if opt == "adam":
                lip_loss = fit.final_loss
        van = toy_fit(models["vanilla", s], s)
        cmp_ok.append(lip_ok["adam"][-1] and van.final_loss >= lip_loss)
    ok = at_least(lip_ok["adam"]) and at_least(lip_ok["sgd"]) and at_least(cmp_ok)
    criterion(8, ok, f"adam {flags_str(lip_ok['adam'])}, sgd {flags_str(lip_ok['sgd'])}, "
                     f"vanilla loss >= lipschitz {flags_str(cmp_ok)}")
    assert ok


@pytest.mark.slow
def test_criterion_09_partial_completion(criterion, interp_models):
    models, _ = interp_models
    pairs = [(partial_completion(models["lipschitz", s], s)[0],
              partial_completion(models["vanilla", s], s)[0]) for s in SEEDS]
    wins = [lip < van for lip, van in pairs]
    ok = at_least(wins)
    criterion(9, ok, f"chamfer (lipschitz, vanilla) "
                     f"{[(round(a, 4), round(b, 4)) for a, b in pairs]}")
    assert ok


# ------------------------------------------------------------------ 10

@pytest.mark.slow
def test_criterion_10_depth_consistency(criterion, depth_runs):
    width, synthetic_ok = 4, True
    for depth in (2, 5, 10):
        for s in (0.5, 1.0, 1.7):
            w = np.full((width, width), s / width)
            lip = MlpParams([w] * depth, [np.zeros(width)] * depth,
                            rho=softplus_inv(np.full(depth, s)), spatial_dim=0)
            van = MlpParams([w] * depth, [np.zeros(width)] * depth, spatial_dim=0)
            prod = regularizer(RegularizerSpec("lipschitz_product", 1.0), lip)[0]
            yosh = regularizer(RegularizerSpec("yoshida_sq_sum", 1.0), van)[0]
            synthetic_ok &= bool(np.isclose(prod, s ** depth, rtol=1e-12, atol=0)
                                 and np.isclose(yosh, depth * s * s, rtol=1e-12, atol=0))
    change = {v: [abs(np.log(depth_runs[v, 10, s][1] / depth_runs[v, 5, s][1])) for s in SEEDS]
              for v in ("lipschitz_product", "yoshida_sq_sum")}
    wins = [a < b for a, b in zip(change["lipschitz_product"], change["yoshida_sq_sum"])]
    ok = synthetic_ok and at_least(wins)
    criterion(10, ok, f"synthetic scaling exact={synthetic_ok}, |ln P10/P5| ours "
                      f"{np.round(change['lipschitz_product'], 2).tolist()} vs yoshida "
                      f"{np.round(change['yoshida_sq_sum'], 2).tolist()}")
    assert ok


# ------------------------------------------------------------------ 11

def test_criterion_11_plumbing(criterion, tmp_path):
    problems = []
    for mode, kscale in [(True, False), (False, False), (False, True)]:
        p = init_params([4, 16, 16, 1], "fullsort", mode, seed=11, spatial_dim=2, kscale=kscale)
        cli.save_checkpoint(tmp_path / "c.json", p, {"note": "acceptance"})
        q, meta = cli.load_checkpoint(tmp_path / "c.json")
        if not all(np.array_equal(a, b) and a.dtype == b.dtype for a, b in zip(p.arrays(), q.arrays())):
            problems.append(f"checkpoint arrays differ ({mode}, {kscale})")
        x, t = make_rng(0).random((64, 2)), make_rng(1).random((64, 2))
        if not np.array_equal(predict(p, x, t), predict(q, x, t)):
            problems.append("checkpoint predictions differ")

    res = 64
    h = 1.0 / (res - 1)
    loop = marching_squares(Circle().sdf(grid_points(res)).reshape(res, res), 0.0, (0, 0), h)
    err = float(np.abs(np.linalg.norm(loop.points() - 0.5, axis=1) - 0.3).max())
    if len(loop) != 1 or err >= h:
        problems.append(f"circle contour error {err:.3g} vs spacing {h:.3g}")

    imgs = synthetic_digits(3)
    data = write_idx(imgs)
    if not np.array_equal(parse_idx(data), imgs):
        problems.append("idx fixture did not parse")
    corruptions = {"bad magic": (b"\x01" + data[1:], 0),
                   "unknown type": (data[:2] + b"\x07" + data[3:], 2),
                   "truncated": (data[:-5], len(data) - 5)}
    for name, (bad, offset) in corruptions.items():
        try:
            parse_idx(bad)
            problems.append(f"idx {name} accepted")
        except IdxParseError as e:
            if e.offset != offset or str(offset) not in str(e):
                problems.append(f"idx {name} reported offset {e.offset}")
    sdfs, xy = raster_dataset(imgs)
    if sdfs.shape != (3, 784) or xy.shape != (784, 2):
        problems.append("raster dataset shape")
    ok = not problems
    criterion(11, ok, "checkpoint, contour, idx" if ok else "; ".join(problems))
    assert ok


# ------------------------------------------------------------------ 2

@pytest.mark.slow
def test_criterion_02_bound_enforcement(criterion, interp_models, autoencoder_runs, depth_runs):
    checkpoints = [(f"interp seed {s}", p) for (m, s), p in interp_models[0].items()
                   if m == "lipschitz"]
    checkpoints += [(f"autoencoder seed {s}", r[2]) for (lip, s), r in autoencoder_runs[0].items()
                    if lip]
    checkpoints += [(f"depth {d} seed {s}", r[0]) for (v, d, s), r in depth_runs.items()
                    if v == "lipschitz_product"]
    _, xy = raster_dataset(synthetic_digits(1))
    violations, slowest, tightest = [], 0.0, 0.0
    for name, p in checkpoints:
        grid = xy if p.latent_dim > 1 else grid_points(32)
        t0 = time.perf_counter()
        rep = empirical_lipschitz(p, grid, n_pairs=1000, seed=2)
        slowest = max(slowest, time.perf_counter() - t0)
        tightest = max(tightest, rep.empirical_ratio_max / rep.certified_bound)
        if rep.empirical_ratio_max > rep.certified_bound:
            violations.append(name)
    ok = not violations and slowest < 60
    criterion(2, ok, f"{len(checkpoints)} checkpoints, {len(violations)} violations, "
                     f"max empirical/certified {tightest:.3f}, slowest probe {slowest:.1f}s")
    assert ok
