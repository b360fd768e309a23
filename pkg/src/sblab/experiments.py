"""Experiment runners: single runs, the three-arm GD / SAM / GD+upsampling
comparison, the learning-time theory suite and the ODE-vs-simulation check.

Every runner is a pure function of its config; all randomness flows from
per-seed ``SeedSequence`` streams so reruns are bit-for-bit identical.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .attention import ansatz_params
from .optimizers import OptimizerConfig, TrainingDiverged, TrainingTrace, evaluation_set, init_params, train
from .sb_metrics import (
    DEFAULT_DROP_RATIO,
    DEFAULT_MIN_DROP,
    DEFAULT_THETA,
    DEFAULT_WINDOW,
    detect_learning_times,
    detect_loss_drops,
    entropy_report,
    head_alignment_at_drops,
)
from .spectra import SpectrumError, geometric_spectrum, make_spectrum, sample_structured_tasks, spectrum_from_config
from .theory_ode import (
    SQRT3,
    EarlyOdeParams,
    PreconditionError,
    gd_ode_rhs,
    integrate_scalar_ode,
    sam_ode_rhs,
    learning_time_sam,
    sam_ode_solution,
    sb_comparison,
)
from .upsampler import ProxyConfig, apply_plan, build_plan, collect_proxy_trajectories, default_ids, kmeans2

ARMS = ("gd", "sam", "gd_upsampled")


class ConfigError(ValueError):
    """Bad or inconsistent configuration (CLI exit code 2)."""


class ArmFailure(RuntimeError):
    def __init__(self, arm: str, seed: int, cause: BaseException):
        super().__init__(f"arm {arm!r} failed at seed {seed}: {cause}")
        self.arm = arm
        self.seed = seed


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    size: int = 3000
    mixture: tuple | None = None  # None: uniform over eigen-directions
    weight_scale: float | None = None  # None: sqrt(d), so E[w w^T] = I under the uniform mixture
    magnitude: str = "sign"  # "sign": w = +-scale e_g, "gaussian": w = scale s e_g

    def __post_init__(self):
        if self.size < 2:
            raise ConfigError("dataset.size must be >= 2")
        if self.magnitude not in ("gaussian", "sign"):
            raise ConfigError("dataset.magnitude must be 'gaussian' or 'sign'")
        if self.mixture is not None:
            object.__setattr__(self, "mixture", tuple(float(x) for x in self.mixture))
        if self.weight_scale is not None and self.weight_scale <= 0:
            raise ConfigError("dataset.weight_scale must be positive")


@dataclass(frozen=True)
class UpsampleConfig:
    proxy_heads: int = 2
    proxy_fraction: float = 1.0 / 3.0
    n_checkpoints: int = 8
    features: str = "trajectory"
    factor: float = 2.0
    mode: str = "duplicate"
    transform: str = "log_relative"

    def __post_init__(self):
        if self.transform not in ("none", "log_relative"):
            raise ConfigError("upsample.transform must be 'none' or 'log_relative'")
        if self.proxy_heads < 1:
            raise ConfigError("upsample.proxy_heads must be >= 1")
        if not 0 < self.proxy_fraction <= 1:
            raise ConfigError("upsample.proxy_fraction must lie in (0, 1]")
        if self.n_checkpoints < 1:
            raise ConfigError("upsample.n_checkpoints must be >= 1")
        if self.features not in ("trajectory", "final"):
            raise ConfigError("upsample.features must be 'trajectory' or 'final'")
        if self.factor < 1:
            raise ConfigError("upsample.factor must be >= 1")
        if self.mode not in ("duplicate", "weight"):
            raise ConfigError("upsample.mode must be 'duplicate' or 'weight'")


def _default_arm(kind: str, rho: float = 0.0) -> OptimizerConfig:
    return OptimizerConfig(
        kind=kind,
        learning_rate=0.2,
        rho=rho,
        grad_mode="empirical",
        steps=100_000,
        snapshot_every=100,
        log_every=100,
        eval_size=5000,
        eval_seed=12345,
    )


@dataclass(frozen=True)
class RunConfig:
    """Configuration of a three-arm experiment (see README for every field)."""

    run_id: str = "fig1"
    spectrum: object = field(default_factory=lambda: {"geometric": {"d": 4, "gamma": 0.5}})
    n_ctx: int = 32
    n_heads: int = 8
    init_mode: str = "gaussian"
    init_scale: float = 3e-3
    gd: OptimizerConfig = field(default_factory=lambda: _default_arm("gd"))
    sam: OptimizerConfig = field(default_factory=lambda: _default_arm("sam_exact", 1e-3))
    gd_upsampled: OptimizerConfig = field(default_factory=lambda: _default_arm("gd"))
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    upsample: UpsampleConfig = field(default_factory=UpsampleConfig)
    base_seed: int = 0
    n_seeds: int = 25
    seeds: tuple | None = None
    theta: float = DEFAULT_THETA
    smoothing_window: int = DEFAULT_WINDOW
    drop_ratio: float = DEFAULT_DROP_RATIO
    min_drop: float = DEFAULT_MIN_DROP
    out_dir: str = "out"

    def __post_init__(self):
        try:
            spec = spectrum_from_config(self.spectrum)
        except (SpectrumError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"spectrum: {exc}") from None
        if self.n_ctx < 1 or self.n_heads < 1:
            raise ConfigError("n_ctx and n_heads must be >= 1")
        if self.init_mode not in ("gaussian", "ansatz"):
            raise ConfigError("init_mode must be 'gaussian' or 'ansatz'")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be non-negative")
        if self.gd.kind != "gd" or self.gd_upsampled.kind != "gd":
            raise ConfigError("the gd and gd_upsampled arms must use kind 'gd'")
        if self.sam.kind == "gd":
            raise ConfigError("the sam arm must use a SAM kind")
        if self.gd_upsampled.grad_mode != "empirical":
            raise ConfigError("gd_upsampled needs grad_mode 'empirical' (it trains on the upsampled dataset)")
        if self.dataset.mixture is not None and len(self.dataset.mixture) != spec.d:
            raise ConfigError("dataset.mixture needs one entry per eigenvalue")
        if self.seeds is not None:
            object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
            if not self.seeds:
                raise ConfigError("seeds must not be empty")
        elif self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")
        if self.smoothing_window < 1:
            raise ConfigError("smoothing_window must be >= 1")
        if not self.run_id or any(c in self.run_id for c in "/\\"):
            raise ConfigError("run_id must be a plain file-name stem")

    @property
    def spec(self):
        return spectrum_from_config(self.spectrum)

    @property
    def seed_list(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.base_seed + i for i in range(self.n_seeds)]

    def arm_config(self, arm: str) -> OptimizerConfig:
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}; expected one of {ARMS}")
        return getattr(self, arm)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                val = dataclasses.asdict(val)
                if "mixture" in val and val["mixture"] is not None:
                    val["mixture"] = list(val["mixture"])
            elif isinstance(val, tuple):
                val = list(val)
            out[f.name] = val
        return out

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        kw = dict(obj)
        defaults = cls()
        for arm in ARMS:
            if arm in kw:
                kw[arm] = _merge(getattr(defaults, arm), kw[arm], arm)
        if "dataset" in kw:
            kw["dataset"] = _merge(DatasetConfig(), kw["dataset"], "dataset")
        if "upsample" in kw:
            kw["upsample"] = _merge(UpsampleConfig(), kw["upsample"], "upsample")
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(obj)


def _merge(base, overrides, name: str):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown field(s) in {name}: {', '.join(unknown)}")
    try:
        return replace(base, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


# -- single runs -------------------------------------------------------------


@dataclass
class RunResult:
    arm: str
    seed: int
    trace: TrainingTrace
    learning_times: object
    drop_steps: np.ndarray
    alignment: np.ndarray
    entropy: object  # EntropyReport or None
    final_test_loss: float
    final_train_loss: float
    plan_counts: dict | None = None

    def to_row(self) -> dict:
        return {
            "seed": self.seed,
            "final_test_loss": self.final_test_loss,
            "final_train_loss": self.final_train_loss,
            "learning_times": self.learning_times.to_dict(),
            "entropy": None if self.entropy is None else self.entropy.to_dict(),
            "drop_steps": [int(s) for s in self.drop_steps],
            "n_drops": int(len(self.drop_steps)),
            "alignment": [float(a) for a in self.alignment],
            "plan": self.plan_counts,
        }


def _streams(seed: int):
    data, init, proxy, minibatch = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(s) for s in (data, init, proxy, minibatch))


def _dataset(cfg: RunConfig, rng):
    spec = cfg.spec
    scale = cfg.dataset.weight_scale if cfg.dataset.weight_scale is not None else math.sqrt(spec.d)
    return sample_structured_tasks(
        spec, cfg.n_ctx, cfg.dataset.size, rng, cfg.dataset.mixture, scale, cfg.dataset.magnitude
    )


def analyse_trace(trace: TrainingTrace, cfg: RunConfig):
    """Learning times, drops, alignment at each drop and the entropy report."""
    spec = cfg.spec
    times = detect_learning_times(trace, spec, cfg.n_ctx, cfg.theta)
    curve = trace.loss_curve if trace.loss_curve is not None else trace.losses
    idx = detect_loss_drops(curve, cfg.smoothing_window, cfg.drop_ratio, cfg.min_drop)
    drop_steps = idx if trace.loss_curve is not None else trace.steps[idx]
    learned = np.flatnonzero(times.learned)
    order = learned[np.argsort(times.steps[learned], kind="stable")] + 1
    n_match = min(len(drop_steps), len(order))
    align = np.array([])
    if n_match and trace.snapshots:
        align = head_alignment_at_drops(trace, drop_steps[:n_match], features=order[:n_match])
    ent = entropy_report(times) if times.n_learned else None
    return times, np.asarray(drop_steps, dtype=int), align, ent


def run_arm(cfg: RunConfig, arm: str, seed: int) -> RunResult:
    """One training run of ``arm`` at ``seed``; GD+upsampling includes its proxy stage."""
    spec = cfg.spec
    opt = cfg.arm_config(arm)
    data_rng, init_rng, proxy_rng, mb_rng = _streams(seed)
    data, _groups = _dataset(cfg, data_rng)
    init = init_params(cfg.init_mode, cfg.init_scale, spec.d, cfg.n_heads, init_rng)
    eval_set = evaluation_set(spec, cfg.n_ctx, opt.eval_size, opt.eval_seed)

    weights = None
    plan_counts = None
    train_data = data if opt.grad_mode == "empirical" else None
    if arm == "gd_upsampled":
        up = cfg.upsample
        proxy_steps = max(up.n_checkpoints, int(round(opt.steps * up.proxy_fraction)))
        proxy_opt = replace(opt, steps=proxy_steps, snapshot_every=0, log_every=max(1, proxy_steps))
        proxy = ProxyConfig(proxy_opt, up.proxy_heads, cfg.init_mode, cfg.init_scale)
        ids = default_ids(len(data))
        trajs = collect_proxy_trajectories(
            data, spec, cfg.n_ctx, proxy, up.n_checkpoints, proxy_rng, ids=ids,
            include_initial=up.transform == "log_relative",
        )
        assignment = kmeans2(trajs, up.features, seed=seed, transform=up.transform)
        plan = build_plan(assignment, up.factor, up.mode)
        applied = apply_plan(data, plan, ids=ids)
        if up.mode == "weight":
            train_data, weights = applied
        else:
            train_data = applied
        plan_counts = {**plan.counts, "effective_size": plan.effective_size}

    trace = train(init, spec, cfg.n_ctx, opt, dataset=train_data, weights=weights, rng=mb_rng, eval_set=eval_set)
    times, drops, align, ent = analyse_trace(trace, cfg)
    return RunResult(
        arm=arm,
        seed=seed,
        trace=trace,
        learning_times=times,
        drop_steps=drops,
        alignment=align,
        entropy=ent,
        final_test_loss=float(trace.test_losses[-1]),
        final_train_loss=float(trace.losses[-1]),
        plan_counts=plan_counts,
    )


def _run_task(args):
    cfg, arm, seed = args
    try:
        return run_arm(cfg, arm, seed)
    except (TrainingDiverged, ValueError, ArithmeticError) as exc:
        raise ArmFailure(arm, seed, exc) from exc


# -- three-arm experiment ----------------------------------------------------


def _median(xs):
    xs = [x for x in xs if x is not None]
    return float(np.median(xs)) if xs else None


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()


def summarize(cfg: RunConfig, results: list[RunResult]) -> dict:
    """Per-arm per-seed rows, medians and the qualitative orderings."""
    d = cfg.spec.d
    arms = {}
    for arm in ARMS:
        rows = [r.to_row() for r in results if r.arm == arm]
        if not rows:
            continue
        arms[arm] = {
            "median_test_loss": _median([r["final_test_loss"] for r in rows]),
            "median_entropy": _median([r["entropy"]["entropy"] if r["entropy"] else None for r in rows]),
            "runs": rows,
        }
    checks = {}
    if "gd" in arms:
        gd_rows = arms["gd"]["runs"]
        checks["gd_exact_d_drops"] = sum(r["n_drops"] == d for r in gd_rows)
        checks["gd_aligned_drops"] = sum(
            r["n_drops"] == d and len(r["alignment"]) == d and min(r["alignment"]) > 0.95 for r in gd_rows
        )
        checks["n_seeds"] = len(gd_rows)
        for other in ("sam", "gd_upsampled"):
            if other in arms:
                checks[f"entropy_{other}_gt_gd"] = _gt(arms[other]["median_entropy"], arms["gd"]["median_entropy"])
                checks[f"test_loss_{other}_lt_gd"] = _gt(arms["gd"]["median_test_loss"], arms[other]["median_test_loss"])
    return {
        "run_id": cfg.run_id,
        "config_hash": cfg.config_hash(),
        "timestamp": _timestamp(),
        "config": cfg.to_dict(),
        "arms": arms,
        "checks": checks,
    }


def _gt(a, b):
    if a is None or b is None:
        return False
    return bool(a > b)


def long_csv_text(results: list[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "seed", "step", "loss", "test_loss"])
    for r in results:
        for s, l, tl in zip(r.trace.steps, r.trace.losses, r.trace.test_losses):
            w.writerow([r.arm, r.seed, int(s), repr(float(l)), repr(float(tl))])
    return buf.getvalue()


def run_experiment(cfg: RunConfig, arms=ARMS, jobs: int = 1, out_dir: str | None = None) -> dict:
    """Run ``arms`` x seeds, write per-run CSVs, the long CSV and the summary JSON.

    Outputs land in ``out_dir`` only when every run succeeded; on failure the
    staging directory is removed and :class:`ArmFailure` names arm and seed.
    """
    out_dir = out_dir or cfg.out_dir
    tasks = [(cfg, arm, seed) for seed in cfg.seed_list for arm in arms]
    os.makedirs(out_dir, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=f".{cfg.run_id}.", dir=out_dir)
    try:
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_task, tasks))
        else:
            results = [_run_task(t) for t in tasks]
        names = []
        for r in results:
            name = f"{cfg.run_id}_{r.arm}_{r.seed}.csv"
            _write(os.path.join(stage, name), r.trace.csv_text())
            names.append(name)
        summary = summarize(cfg, results)
        _write(os.path.join(stage, f"{cfg.run_id}_long.csv"), long_csv_text(results))
        _write(os.path.join(stage, f"{cfg.run_id}_summary.json"), json.dumps(summary, indent=2) + "\n")
        names += [f"{cfg.run_id}_long.csv", f"{cfg.run_id}_summary.json"]
        for name in names:
            os.replace(os.path.join(stage, name), os.path.join(out_dir, name))
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return summary


def run_fig1(cfg: RunConfig, jobs: int = 1, out_dir: str | None = None) -> dict:
    return run_experiment(cfg, ARMS, jobs, out_dir)


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# -- theory suite ------------------------------------------------------------

DEFAULT_THEORY_GRID = {
    "d": [2, 3, 4, 8],
    "n_spectra": 250,
    "eig_range": [0.05, 2.0],
    "eps": [0.01, 0.05],
    "rho_fraction": [0.1, 0.5, 0.9],
    "c": [1.0],
    "tau": [1.0],
    "seed": 0,
}

# Closed-form paths written alongside the theory grid, for plotting.
DEFAULT_THEORY_PATHS = {"spectrum": [1.0, 0.5, 0.25], "eps": 0.05, "rho": 0.02, "c": 1.0, "tau": 1.0}


def _random_spectrum(d, lo, hi, rng):
    while True:
        x = np.sort(np.exp(rng.uniform(math.log(lo), math.log(hi), size=d)))[::-1]
        if np.all(np.diff(x) < 0):
            return make_spectrum(d, x)


def run_theory_suite(grid: dict | None = None, keep_rows: bool = False) -> dict:
    """Entropy inequality and majorization over random spectra x (eps, rho, c, tau).

    ``rho_fraction`` is measured against the bound ``(sqrt(3)/2) eps``; cells at
    or above 1 violate the hypothesis and are reported as precondition-skipped.
    With ``keep_rows`` the report also carries one row per cell under ``rows``.
    """
    g = dict(DEFAULT_THEORY_GRID)
    if grid is not None:
        unknown = sorted(set(grid) - set(g) - {"spectra", "rho", "paths"})
        if unknown:
            raise ConfigError(f"unknown theory grid field(s): {', '.join(unknown)}")
        g.update(grid)
    rng = np.random.default_rng(g["seed"])
    if "spectra" in g:
        spectra = [spectrum_from_config(s) for s in g["spectra"]]
    else:
        lo, hi = g["eig_range"]
        spectra = [_random_spectrum(d, lo, hi, rng) for d in g["d"] for _ in range(g["n_spectra"])]
    if "rho" in g:
        rho_axis = [("rho", r) for r in g["rho"]]
    else:
        rho_axis = [("fraction", f) for f in g["rho_fraction"]]
    cells = list(itertools.product(range(len(spectra)), g["eps"], rho_axis, g["c"], g["tau"]))
    if not cells:
        raise ConfigError("empty theory grid")

    counts = {
        "entropy_inequality": {"pass": 0, "fail": 0},
        "majorization": {"pass": 0, "fail": 0},
    }
    skipped = 0
    failures = []
    rows = []
    for si, eps, (kind, r), c, tau in cells:
        spec = spectra[si]
        rho = r if kind == "rho" else r * SQRT3 / 2.0 * eps
        try:
            cmp = sb_comparison(spec, eps, c, tau, rho)
        except PreconditionError:
            skipped += 1
            if keep_rows:
                rows.append((spec.eigenvalues.tolist(), eps, rho, c, tau, None, None, None))
            continue
        if keep_rows:
            rows.append((spec.eigenvalues.tolist(), eps, rho, c, tau, cmp.H_gd, cmp.H_sam, cmp.majorization_holds))
        ent_ok = cmp.H_sam > cmp.H_gd if rho > 0 else math.isclose(cmp.H_sam, cmp.H_gd, rel_tol=1e-12)
        counts["entropy_inequality"]["pass" if ent_ok else "fail"] += 1
        counts["majorization"]["pass" if cmp.majorization_holds else "fail"] += 1
        if not (ent_ok and cmp.majorization_holds) and len(failures) < 20:
            failures.append(
                {"eigenvalues": spec.eigenvalues.tolist(), "eps": eps, "rho": rho, "c": c, "tau": tau,
                 "H_gd": cmp.H_gd, "H_sam": cmp.H_sam, "majorizes": cmp.majorization_holds}
            )
    n_fail = sum(v["fail"] for v in counts.values())
    report = {
        "cells": len(cells),
        "precondition_skipped": skipped,
        "checks": counts,
        "failures": failures,
        "ok": n_fail == 0,
    }
    if keep_rows:
        report["rows"] = rows
    return report


def theory_rows_csv(rows) -> str:
    """One line per grid cell; skipped cells have empty entropy columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["eigenvalues", "eps", "rho", "c", "tau", "H_gd", "H_sam", "majorization_holds", "status"])
    for lam, eps, rho, c, tau, h_gd, h_sam, maj in rows:
        lam_s = " ".join(repr(float(x)) for x in lam)
        if h_gd is None:
            w.writerow([lam_s, repr(eps), repr(rho), repr(c), repr(tau), "", "", "", "precondition-skipped"])
        else:
            w.writerow([lam_s, repr(eps), repr(rho), repr(c), repr(tau), repr(h_gd), repr(h_sam), int(maj), "ok"])
    return buf.getvalue()


def theory_paths_csv(spectrum, eps: float, rho: float, c: float, tau: float = 1.0, n_points: int = 200) -> str:
    """Closed-form early-phase paths ``v_i(t)`` under both ODEs, from ``eps`` to ``c lam_i^{-1/3}``."""
    spec = spectrum_from_config(spectrum)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "feature", "t", "v"])
    for arm, r in (("gd", 0.0), ("sam", rho)):
        for i, lam in enumerate(spec.eigenvalues, start=1):
            p = EarlyOdeParams(float(lam), r, tau)
            t_end = learning_time_sam(float(lam), eps, c, tau, r)
            ts = np.linspace(0.0, t_end, n_points)
            vs = sam_ode_solution(ts, eps, p)
            for t, v in zip(ts, vs):
                w.writerow([arm, i, repr(float(t)), repr(float(v))])
    return buf.getvalue()


# -- ODE versus simulation ---------------------------------------------------

DEFAULT_ODE_CHECK = {
    "spectrum": {"eigenvalues": [1.0, 0.5, 0.25]},
    "n_ctx": 32,
    "eps": 0.01,
    "rho": 0.005,
    "c": 0.5,
    "eta": 0.01,
    "tol": 0.05,
}


def simulate_feature_escape(spec, n_ctx, i, eps, rho, eta, v_stop, max_steps=10_000_000):
    """Population first-order SAM (GD when ``rho == 0``) from the ansatz state where
    features ``< i`` sit at their fixed points and head ``i`` starts at ``eps``.

    Returns times ``eta * step`` and ``v_i`` until ``v_i`` reaches ``v_stop``.
    """
    from .optimizers import sam_step_first_order

    d = spec.d
    p = ansatz_params(spec, n_ctx, d, learned=i - 1, active_value=eps)
    ts, vs = [0.0], [float(p.v[i - 1])]
    step = 0
    while vs[-1] < v_stop:
        p = sam_step_first_order(p, spec, n_ctx, eta, rho, active=i)
        step += 1
        ts.append(step * eta)
        vs.append(float(p.v[i - 1]))
        if step >= max_steps or not math.isfinite(vs[-1]) or vs[-1] <= 0:
            raise ArithmeticError(f"feature {i} did not escape (v={vs[-1]:.3g} after {step} steps)")
    return np.array(ts), np.array(vs)


def run_ode_vs_simulation(config: dict | None = None) -> dict:
    """Compare simulated early-phase ``v_i(t)`` with RK4 paths of the reduced ODEs.

    Each coordinate of an ansatz head moves as ``u' = 2 lam^2 u^2`` (GD) under
    the clock ``t = eta * step``, which is the reduced ODE with ``tau = 1/2``.
    """
    c = dict(DEFAULT_ODE_CHECK)
    if config is not None:
        unknown = sorted(set(config) - set(c))
        if unknown:
            raise ConfigError(f"unknown ode-check field(s): {', '.join(unknown)}")
        c.update(config)
    spec = spectrum_from_config(c["spectrum"])
    eps, rho, eta, tol = c["eps"], c["rho"], c["eta"], c["tol"]
    if 2 * rho / SQRT3 >= eps:
        raise ConfigError("rho must satisfy rho < (sqrt(3)/2) eps")
    rows = []
    for arm, r in (("gd", 0.0), ("sam", rho)):
        for i, lam in enumerate(spec.eigenvalues, start=1):
            v_stop = 0.5 * c["c"] * lam ** (-1.0 / 3.0)
            if eps >= v_stop:
                raise ConfigError(f"eps={eps} is not below 0.5 c lam_{i}^(-1/3) = {v_stop:.4g}")
            ts, vs = simulate_feature_escape(spec, c["n_ctx"], i, eps, r, eta, v_stop)
            p = EarlyOdeParams(float(lam), r, tau=0.5)
            rhs = (lambda v, p=p: gd_ode_rhs(v, p)) if r == 0 else (lambda v, p=p: sam_ode_rhs(v, p))
            _, ode = integrate_scalar_ode(rhs, eps, ts[-1], eta)
            ode = ode[: len(vs)]
            mask = vs <= v_stop
            rel = np.abs(vs[mask] - ode[mask]) / np.abs(ode[mask])
            worst = float(rel.max())
            rows.append(
                {"arm": arm, "feature": i, "lam": float(lam), "steps": int(len(ts) - 1), "max_rel_err": worst, "pass": worst <= tol}
            )
    return {"config": {k: v for k, v in c.items()}, "rows": rows, "ok": all(r["pass"] for r in rows)}
