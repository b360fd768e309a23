"""Acceptance criteria, one test each, run at their stated tolerances.

Every test appends a PASS/FAIL line to the summary printed at the end of the
pytest session.  Criterion 7 trains 25 seeds x 3 arms and takes ~20 minutes on
one core; deselect it with ``-m "not slow"``.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, central_diff, random_spectrum
from planted import planted_corpus, toy_proxy_trajectories
from sblab.attention import ModelParams, ansatz_params, hessian_blocks, population_gradients, population_loss
from sblab.cli import main
from sblab.experiments import RunConfig, run_fig1, run_ode_vs_simulation, run_theory_suite
from sblab.optimizers import sam_step_exact, sam_step_first_order
from sblab.spectra import CovarianceSpec, expected_sample_cov_sq_eigs, geometric_spectrum
from sblab.theory_ode import (
    MergedOdeParams,
    integrate_scalar_ode,
    merged_escape_times,
    merged_gd_solution,
    merged_implicit_solution_check,
    merged_ode_rhs,
    merged_sam_blowup_time,
    merged_sam_small_init_solution,
    merged_small_init_rhs,
)
from sblab.upsampler import export_trajectories, kmeans2


def record(name, ok, detail):
    ACCEPTANCE.append((name, bool(ok), detail))
    assert ok, f"{name}: {detail}"


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_gradient_and_hessian_fd():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_g = worst_h = 0.0
    for _ in range(100):
        d, H, n = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.choice([1, 10, 100]))
        spec = random_spectrum(rng, d)
        p = ModelParams(rng.normal(0, 0.7, H), rng.normal(0, 0.7, (H, d)), rng.normal(0, 0.7, (H, d)))
        x0 = p.flat()
        g = population_gradients(p, spec, n).flat()
        fd = central_diff(lambda x: population_loss(ModelParams.from_flat(x, d), spec, n), x0)
        worst_g = max(worst_g, np.max(np.abs(g - fd)) / np.max(np.abs(fd)))
        head = int(rng.integers(1, H + 1))
        block = 2 * d + 1
        start = (head - 1) * block
        cols = []
        for j in range(block):
            e = np.zeros_like(x0)
            e[start + j] = 1e-5
            gp = population_gradients(ModelParams.from_flat(x0 + e, d), spec, n).flat()[start : start + block]
            gm = population_gradients(ModelParams.from_flat(x0 - e, d), spec, n).flat()[start : start + block]
            cols.append((gp - gm) / 2e-5)
        Hfd = np.array(cols).T
        Hb = hessian_blocks(p, spec, n, head)
        worst_h = max(worst_h, np.max(np.abs(Hb - Hfd)) / np.max(np.abs(Hfd)))
    elapsed = time.perf_counter() - t0
    ok = worst_g < 1e-6 and worst_h < 1e-5 and elapsed < 60
    record("1 gradient/Hessian vs finite differences", ok, f"max rel err grad {worst_g:.2e}, Hessian {worst_h:.2e}, {elapsed:.1f}s")


# -- 2 ------------------------------------------------------------------------------


def _mc_diag_sq(lam, n, samples, rng, chunk=5000):
    s1 = np.zeros(lam.size)
    s2 = np.zeros(lam.size)
    done = 0
    while done < samples:
        b = min(chunk, samples - done)
        X = rng.standard_normal((b, n, lam.size)) * np.sqrt(lam)
        S = np.einsum("bni,bnj->bij", X, X) / n
        diag = np.einsum("bij,bji->bi", S, S)
        s1 += diag.sum(0)
        s2 += (diag**2).sum(0)
        done += b
    mean = s1 / samples
    var = (s2 - samples * mean**2) / (samples - 1)
    return mean, np.sqrt(var / samples)


def test_criterion_2_a_i_monte_carlo():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 4))
        n = int(rng.choice([1, 2, 5, 10, 30, 100]))
        spec = random_spectrum(rng, d)
        mean, se = _mc_diag_sq(spec.eigenvalues, n, 100_000, rng)
        z = np.abs(mean - expected_sample_cov_sq_eigs(spec, n)) / se
        worst = max(worst, float(z.max()))
    elapsed = time.perf_counter() - t0
    record("2 a_i closed form vs Monte Carlo", worst < 3 and elapsed < 120, f"max |z| {worst:.2f} over 20 pairs, {elapsed:.1f}s")


# -- 3 ------------------------------------------------------------------------------


def test_criterion_3_ode_fidelity():
    t0 = time.perf_counter()
    configs = [
        None,
        {"spectrum": {"eigenvalues": [1.2, 0.6]}, "n_ctx": 16},
        {"spectrum": {"eigenvalues": [0.8]}, "n_ctx": 8},
    ]
    worst, ok = 0.0, True
    for c in configs:
        rep = run_ode_vs_simulation(c)
        ok &= rep["ok"]
        worst = max(worst, max(r["max_rel_err"] for r in rep["rows"]))
    elapsed = time.perf_counter() - t0
    ok = ok and worst < 0.05 and elapsed < 300
    record("3 simulated early dynamics vs RK4 of the reduced ODEs", ok, f"max rel err {worst:.4f} (d = 3, 2, 1), {elapsed:.1f}s")


# -- 4 ------------------------------------------------------------------------------


def _residual(sol, rhs, ts, h=1e-3):
    # five-point stencil, truncation error O(h^4)
    def deriv(t):
        return (-sol(t + 2 * h) + 8 * sol(t + h) - 8 * sol(t - h) + sol(t - 2 * h)) / (12 * h)

    return max(abs(deriv(t) - rhs(sol(t))) for t in ts)


def test_criterion_4_closed_forms():
    t0 = time.perf_counter()
    implicit = gd_res = small_res = 0.0
    for gamma, alpha, rho, s0 in [(1.0, 1.0, 0.2, 1e-3), (2.0, 0.5, 0.05, 1e-4), (0.5, 3.0, 0.4, 1e-2)]:
        p = MergedOdeParams(gamma, alpha, rho, s0=s0)
        t, s = integrate_scalar_ode(lambda x: merged_ode_rhs(x, p), s0, 3.0 / gamma, 1e-3)
        # the implicit relation describes the path below gamma / alpha, where the sign term
        # switches; RK4 stages straddling the switch chatter, so stop just short of it
        stop = int(np.argmax(s >= 0.99 * gamma / alpha)) if np.any(s >= 0.99 * gamma / alpha) else len(s)
        below = list(zip(t[1:stop], s[1:stop]))
        implicit = max(implicit, max(abs(merged_implicit_solution_check(si, ti, p)) for ti, si in below))
        g = MergedOdeParams(gamma, alpha, 0.0, s0=s0)
        ts = np.linspace(0.01, 4.0 / gamma, 50)
        gd_res = max(gd_res, _residual(lambda x: float(merged_gd_solution(x, g)), lambda v: merged_ode_rhs(v, g), ts))
        tb = merged_sam_blowup_time(p)
        ts = np.linspace(0.01, 0.6 * tb, 50)
        small_res = max(
            small_res,
            _residual(lambda x: float(merged_sam_small_init_solution(x, p)), lambda v: merged_small_init_rhs(v, p), ts),
        )

    rng = np.random.default_rng(4)
    positive, approx_cases, approx_worst = True, 0, 0.0
    for _ in range(500):
        s0 = 10 ** rng.uniform(-6, -3)
        s_star = s0 * 10 ** rng.uniform(1, 4)
        alpha = 10 ** rng.uniform(-1, 1)
        rho = 10 ** rng.uniform(-4, -1)
        sigma = 10 ** rng.uniform(-1, 2)
        e = merged_escape_times(s0, s_star, sigma, alpha, rho)
        positive &= e.delta_t > 0
        if sigma >= 100 * rho * alpha * math.sqrt(s_star):
            approx_cases += 1
            approx_worst = max(approx_worst, abs(e.delta_t_approx - e.delta_t) / e.delta_t)
    elapsed = time.perf_counter() - t0
    ok = implicit < 1e-7 and gd_res < 1e-8 and small_res < 1e-8 and positive and approx_worst < 0.05 and elapsed < 60
    record(
        "4 merged closed forms and escape times",
        ok,
        f"implicit {implicit:.1e}, GD {gd_res:.1e}, small-init SAM {small_res:.1e}, "
        f"dt > 0 in 500/500: {positive}, small-rho approx worst {approx_worst:.2%} over {approx_cases} cases, {elapsed:.1f}s",
    )


# -- 5 ------------------------------------------------------------------------------


def test_criterion_5_entropy_and_majorization_at_scale():
    t0 = time.perf_counter()
    rep = run_theory_suite({"d": [2, 3, 4, 8], "n_spectra": 250, "eps": [0.01], "rho_fraction": [0.5], "seed": 5})
    elapsed = time.perf_counter() - t0
    c = rep["checks"]
    ok = (
        rep["cells"] == 1000
        and rep["precondition_skipped"] == 0
        and c["entropy_inequality"]["pass"] == 1000
        and c["majorization"]["pass"] == 1000
        and elapsed < 60
    )
    record(
        "5 H_sam > H_gd and majorization over 1000 spectra",
        ok,
        f"entropy {c['entropy_inequality']['pass']}/1000, majorization {c['majorization']['pass']}/1000, {elapsed:.1f}s",
    )


# -- 6 ------------------------------------------------------------------------------


def test_criterion_6_first_order_sam_slope():
    t0 = time.perf_counter()
    spec = geometric_spectrum(3)
    n, eta = 16, 0.1
    p = ansatz_params(spec, n, 3, learned=1, active_value=0.05)
    rhos = np.array([1e-3, 3e-3, 1e-2, 3e-2, 1e-1])
    diffs = []
    for rho in rhos:
        exact = sam_step_exact(p, lambda w: population_gradients(w, spec, n), eta, rho)
        first = sam_step_first_order(p, spec, n, eta, rho)
        diffs.append(np.linalg.norm(exact.flat() - first.flat()))
    slope = float(np.polyfit(np.log(rhos), np.log(diffs), 1)[0])
    elapsed = time.perf_counter() - t0
    record("6 exact vs first-order SAM discrepancy ~ rho^2", abs(slope - 2) <= 0.2 and elapsed < 60, f"slope {slope:.3f}, {elapsed:.2f}s")


# -- 7 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fig1(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig1")
    t0 = time.perf_counter()
    summary = run_fig1(RunConfig(), out_dir=str(out))
    return summary, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7a_gd_drops_and_alignment(fig1):
    summary, elapsed = fig1
    ch = summary["checks"]
    n = ch["n_seeds"]
    ok = n == 25 and ch["gd_exact_d_drops"] == n and ch["gd_aligned_drops"] == n and elapsed < 1800
    record(
        "7a GD shows exactly d drops, each with |cos| > 0.95",
        ok,
        f"exactly d drops in {ch['gd_exact_d_drops']}/{n} seeds, aligned at every drop in {ch['gd_aligned_drops']}/{n}; "
        f"whole experiment {elapsed / 60:.1f} min",
    )


@pytest.mark.slow
@pytest.mark.parametrize("arm", ["sam", "gd_upsampled"])
def test_criterion_7b_entropy(fig1, arm):
    summary, _ = fig1
    a = summary["arms"]
    record(
        f"7b median entropy {arm} > gd",
        summary["checks"][f"entropy_{arm}_gt_gd"],
        f"{arm} {a[arm]['median_entropy']:.4f} vs gd {a['gd']['median_entropy']:.4f}",
    )


@pytest.mark.slow
@pytest.mark.parametrize("arm", ["sam", "gd_upsampled"])
def test_criterion_7c_test_loss(fig1, arm):
    summary, _ = fig1
    a = summary["arms"]
    record(
        f"7c median test loss {arm} < gd",
        summary["checks"][f"test_loss_{arm}_lt_gd"],
        f"{arm} {a[arm]['median_test_loss']:.6f} vs gd {a['gd']['median_test_loss']:.6f}",
    )


# -- 8 ------------------------------------------------------------------------------


def test_criterion_8_upsampling_pipeline():
    t0 = time.perf_counter()
    trajs, is_hard = planted_corpus()
    acc_traj = float(np.mean(kmeans2(trajs, "trajectory", seed=0).hard_mask == is_hard))
    acc_final = float(np.mean(kmeans2(trajs, "final", seed=0).hard_mask == is_hard))
    toy, is_small = toy_proxy_trajectories()
    capture = float(kmeans2(toy, "trajectory", seed=0, transform="log_relative").hard_mask[is_small].mean())
    elapsed = time.perf_counter() - t0
    ok = acc_traj >= 0.99 and acc_final >= 0.95 and capture >= 0.9 and elapsed < 120
    record(
        "8 planted recovery and hard-cluster capture",
        ok,
        f"trajectory {acc_traj:.3f}, final {acc_final:.3f}, small-eigenvalue capture {capture:.3f}, {elapsed:.1f}s",
    )


# -- 9 ------------------------------------------------------------------------------

TINY_RUN = {
    "run_id": "det",
    "spectrum": {"geometric": {"d": 2, "gamma": 0.5}},
    "n_ctx": 8,
    "n_heads": 2,
    "seeds": [0, 1],
    "gd": {"steps": 200, "log_every": 10, "snapshot_every": 10, "eval_size": 100},
    "sam": {"steps": 200, "log_every": 10, "snapshot_every": 10, "eval_size": 100},
    "gd_upsampled": {"steps": 200, "log_every": 10, "snapshot_every": 10, "eval_size": 100},
    "dataset": {"size": 120},
    "upsample": {"n_checkpoints": 3},
}


def _tree(d):
    return {
        os.path.relpath(os.path.join(root, f), d): open(os.path.join(root, f), "rb").read()
        for root, _, files in os.walk(d)
        for f in files
    }


def _all_commands(base, cfg, grid, ode, traj):
    return [
        ["simulate", "--config", cfg, "--arm", "sam", "--seed", "4", "--out", f"{base}/sim"],
        ["fig1", "--config", cfg, "--out", f"{base}/fig1"],
        ["theory", "--config", grid, "--out", f"{base}/theory"],
        ["ode-check", "--config", ode, "--out", f"{base}/ode"],
        ["cluster", "--in", traj, "--seed", "2", "--out", f"{base}/plan.json"],
        ["upsample", "--plan", f"{base}/plan.json", "--factor", "3", "--mode", "weight", "--out", f"{base}/plan3.json"],
        ["metrics", "--in", f"{base}/sim/det_sam_4.csv", "--config", cfg, "--out", f"{base}/metrics.json"],
    ]


def test_criterion_9_cli_determinism(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("SB_LAB_OUT", raising=False)
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    cfg = inputs / "run.json"
    cfg.write_text(json.dumps(TINY_RUN))
    grid = inputs / "grid.json"
    grid.write_text(json.dumps({"d": [2, 3], "n_spectra": 5, "rho_fraction": [0.5, 1.5]}))
    ode = inputs / "ode.json"
    ode.write_text(json.dumps({"spectrum": {"eigenvalues": [1.0, 0.5]}, "n_ctx": 16, "eps": 0.02, "rho": 0.008, "eta": 0.02}))
    traj = inputs / "traj.jsonl"
    export_trajectories(planted_corpus(n=300, seed=9)[0], str(traj))

    trees, codes = [], []
    for rep in ("a", "b"):
        base = tmp_path / rep
        base.mkdir()
        codes.append([main(cmd) for cmd in _all_commands(str(base), str(cfg), str(grid), str(ode), str(traj))])
        trees.append(_tree(base))
    capsys.readouterr()
    same = trees[0] == trees[1]
    ok = same and all(c == 0 for c in codes[0] + codes[1]) and len(trees[0]) >= 12
    record("9 byte-identical outputs on rerun", ok, f"{len(trees[0])} output files from 7 commands, identical: {same}")
