"""Scalar ODEs for early feature learning, learning times, and entropy tools.

Two model families appear here.  The separate key/query model reduces, per
feature, to ``tau v' = lam^2 v^2`` under GD and
``tau v' = lam^2 v^2 - rho_hat lam^2 v`` under first-order SAM, with
``rho_hat = 2 rho / sqrt(3)``.  The merged key/query model is tracked through
the squared weight norm ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .spectra import CovarianceSpec

SQRT3 = math.sqrt(3.0)
RHO_HAT_EPS = 1e-12


class OdeBlowUp(ArithmeticError):
    """Integration or closed form left its domain of validity."""


class PreconditionError(ValueError):
    pass


def rho_hat(rho: float) -> float:
    return 2.0 * rho / SQRT3


@dataclass(frozen=True)
class EarlyOdeParams:
    lam: float
    rho: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        if self.lam <= 0 or self.tau <= 0:
            raise ValueError("lam and tau must be positive")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    @property
    def rho_hat(self) -> float:
        return rho_hat(self.rho)


def gd_ode_rhs(v: float, p: EarlyOdeParams) -> float:
    return p.lam**2 * v**2 / p.tau


def sam_ode_rhs(v: float, p: EarlyOdeParams) -> float:
    return p.lam**2 * v * (v - p.rho_hat) / p.tau


def gd_ode_solution(t, v0: float, p: EarlyOdeParams):
    """v(t) = v0 / (1 - lam^2 v0 t / tau); blows up at t = tau / (lam^2 v0)."""
    t = np.asarray(t, dtype=float)
    denom = 1.0 - p.lam**2 * v0 * t / p.tau
    if np.any(denom <= 0):
        raise OdeBlowUp(f"GD solution blows up at t = {p.tau / (p.lam**2 * v0):.6g}")
    return v0 / denom


def sam_ode_solution(t, v0: float, p: EarlyOdeParams):
    """Logistic-type solution of the SAM ODE, v = r / (1 + (r/v0 - 1) e^{r lam^2 t / tau})."""
    r = p.rho_hat
    if r < RHO_HAT_EPS:
        return gd_ode_solution(t, v0, p)
    t = np.asarray(t, dtype=float)
    denom = 1.0 + (r / v0 - 1.0) * np.exp(r * p.lam**2 * t / p.tau)
    if np.any(denom <= 0):
        raise OdeBlowUp("SAM solution blows up before the requested time")
    return r / denom


def integrate_scalar_ode(
    rhs: Callable[[float], float],
    v0: float,
    t_end: float,
    dt: float,
    v_cap: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Classical fixed-step RK4.

    Returns arrays ``(t, v)``.  The last step is shortened to land on ``t_end``.
    With ``v_cap`` set, integration stops at the first point where ``|v|``
    exceeds it (used for the GD ODE, which blows up in finite time).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not math.isfinite(v0):
        raise ValueError("v0 must be finite")
    n_full = int(math.floor(t_end / dt + 1e-9))
    ts = [0.0]
    vs = [float(v0)]
    t, v = 0.0, float(v0)
    steps = [dt] * n_full
    rest = t_end - n_full * dt
    if rest > 1e-12 * max(1.0, t_end):
        steps.append(rest)
    for h in steps:
        try:
            k1 = rhs(v)
            k2 = rhs(v + 0.5 * h * k1)
            k3 = rhs(v + 0.5 * h * k2)
            k4 = rhs(v + h * k3)
        except OverflowError:
            raise OdeBlowUp(f"overflow after t = {t:.6g}; stop before the blow-up time") from None
        v = v + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        t = t + h
        if not math.isfinite(v):
            raise OdeBlowUp(f"non-finite state at t = {t:.6g}; stop before the blow-up time")
        ts.append(t)
        vs.append(v)
        if v_cap is not None and abs(v) > v_cap:
            break
    return np.array(ts), np.array(vs)


def _upper_limit(lam: float, c: float) -> float:
    return c * lam ** (-1.0 / 3.0)


def learning_time_gd(lam: float, eps: float, c: float, tau: float = 1.0) -> float:
    """Time for ``tau v' = lam^2 v^2`` to carry v from ``eps`` to ``c lam^{-1/3}``."""
    u = _upper_limit(lam, c)
    if eps >= u:
        raise PreconditionError(f"feature already past early phase (eps={eps} >= c lam^(-1/3)={u})")
    if eps <= 0:
        raise PreconditionError("eps must be positive")
    return tau / lam**2 * (1.0 / eps - 1.0 / u)


def learning_time_sam(lam: float, eps: float, c: float, tau: float = 1.0, rho: float = 0.0) -> float:
    """Same journey under the SAM ODE; needs ``rho < (sqrt(3)/2) eps``."""
    r = rho_hat(rho)
    if r < RHO_HAT_EPS:
        return learning_time_gd(lam, eps, c, tau)
    if r >= eps:
        raise PreconditionError(
            f"rho={rho} violates rho < (sqrt(3)/2) eps = {SQRT3 / 2 * eps} (SAM ODE has a repelling point at 2 rho/sqrt(3))"
        )
    u = _upper_limit(lam, c)
    if eps >= u:
        raise PreconditionError(f"feature already past early phase (eps={eps} >= c lam^(-1/3)={u})")
    return tau / (lam**2 * r) * (math.log1p(-r / u) - math.log1p(-r / eps))


@dataclass(frozen=True)
class TimeSequence:
    times: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        if t.size < 1:
            raise ValueError("need at least one time")
        if np.any(~np.isfinite(t)) or np.any(t <= 0):
            raise ValueError("times must be positive and finite")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def normalized(self) -> np.ndarray:
        return self.times / self.times.sum()

    def __len__(self):
        return int(self.times.size)


def entropy(ts) -> float:
    """Shannon entropy (nats) of sum-normalised learning times."""
    if not isinstance(ts, TimeSequence):
        ts = TimeSequence(ts)
    p = ts.normalized
    return float(-np.sum(p * np.log(p)))


def majorizes(a: Sequence[float], b: Sequence[float], tol: float = 1e-12) -> bool:
    """True when ``a`` majorizes ``b``: sorted prefix sums of ``a`` dominate those of ``b``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9:
        raise ValueError("both vectors must sum to 1 within 1e-9")
    ca = np.cumsum(np.sort(a)[::-1])
    cb = np.cumsum(np.sort(b)[::-1])
    return bool(np.all(ca[:-1] >= cb[:-1] - tol))


@dataclass(frozen=True)
class SBComparison:
    t_gd: TimeSequence
    t_sam: TimeSequence
    H_gd: float
    H_sam: float
    majorization_holds: bool


def check_sb_preconditions(spec: CovarianceSpec, eps: float, c: float, rho: float):
    if rho < 0:
        raise PreconditionError("rho must be non-negative")
    if rho_hat(rho) >= eps:
        raise PreconditionError(f"rho={rho} violates rho < (sqrt(3)/2) eps = {SQRT3 / 2 * eps}")
    upper = c * spec.eigenvalues ** (-1.0 / 3.0)
    if eps >= upper.min():
        raise PreconditionError(f"eps={eps} must be below min_i c lam_i^(-1/3) = {upper.min()}")


def sb_comparison(spec: CovarianceSpec, eps: float, c: float, tau: float = 1.0, rho: float = 0.0) -> SBComparison:
    """Early-phase learning times under GD and SAM and their entropies."""
    check_sb_preconditions(spec, eps, c, rho)
    lam = spec.eigenvalues
    t_gd = TimeSequence([learning_time_gd(x, eps, c, tau) for x in lam])
    t_sam = TimeSequence([learning_time_sam(x, eps, c, tau, rho) for x in lam])
    return SBComparison(
        t_gd,
        t_sam,
        entropy(t_gd),
        entropy(t_sam),
        majorizes(t_gd.normalized, t_sam.normalized),
    )


# -- merged key/query model --------------------------------------------------


@dataclass(frozen=True)
class MergedOdeParams:
    gamma: float
    alpha: float
    rho: float = 0.0
    tau: float = 1.0
    s0: float = 1e-4

    def __post_init__(self):
        if min(self.gamma, self.alpha, self.tau, self.s0) <= 0:
            raise ValueError("gamma, alpha, tau and s0 must be positive")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.gamma - self.alpha * self.s0 <= 0:
            raise ValueError("need gamma - alpha * s0 > 0")

    @property
    def delta(self) -> float:
        return math.sqrt(self.rho**2 + 4.0 * self.gamma / self.alpha)

    @property
    def r_plus(self) -> float:
        return 0.5 * (self.rho + self.delta)

    @property
    def r_minus(self) -> float:
        return 0.5 * (self.rho - self.delta)


def merged_ode_rhs(s: float, p: MergedOdeParams) -> float:
    """tau s' = 2 s (gamma - alpha s) + 2 sign(gamma - alpha s) rho alpha s^{3/2}, divided by tau.

    The sign factor makes ``s = gamma/alpha`` an equilibrium.
    """
    if s < 0:
        raise ValueError("s must be non-negative")
    gap = p.gamma - p.alpha * s
    return (2.0 * s * gap + 2.0 * np.sign(gap) * p.rho * p.alpha * s**1.5) / p.tau


def merged_small_init_rhs(s: float, p: MergedOdeParams) -> float:
    """Early-phase form ``tau s' = 2 gamma s + 2 rho alpha s^{3/2}``."""
    return (2.0 * p.gamma * s + 2.0 * p.rho * p.alpha * max(s, 0.0) ** 1.5) / p.tau


def merged_gd_solution(t, p: MergedOdeParams):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    decay = np.exp(-2.0 * p.gamma * t / p.tau)
    return p.gamma / (p.alpha * (1.0 - decay) + (p.gamma / p.s0) * decay)


def merged_sam_blowup_time(p: MergedOdeParams) -> float:
    if p.rho == 0:
        return math.inf
    return p.tau / p.gamma * math.log1p(p.gamma / (p.rho * p.alpha * math.sqrt(p.s0)))


def merged_sam_small_init_solution(t, p: MergedOdeParams):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    t_blow = merged_sam_blowup_time(p)
    if np.any(t >= t_blow):
        raise OdeBlowUp(f"small-init SAM solution blows up at t = {t_blow:.6g}")
    u0 = math.sqrt(p.s0)
    grow = np.exp(p.gamma * t / p.tau)
    return (p.gamma * u0 * grow / (p.gamma + p.rho * p.alpha * u0 * (1.0 - grow))) ** 2


def merged_implicit_solution_check(s_t: float, t: float, p: MergedOdeParams) -> float:
    """Residual of the implicit solution of the full merged SAM ODE at ``(t, s_t)``."""
    u, u0 = math.sqrt(s_t), math.sqrt(p.s0)
    rp, rm = p.r_plus, p.r_minus
    ratio_m = (u - rm) / (u0 - rm)
    ratio_p = (u - rp) / (u0 - rp)
    if s_t <= 0 or ratio_m <= 0 or ratio_p <= 0:
        raise OdeBlowUp(f"log argument out of domain at s={s_t} (r+={rp}, r-={rm})")
    lhs = 0.5 / p.gamma * math.log(s_t / p.s0) + (math.log(ratio_m) / rm - math.log(ratio_p) / rp) / (
        p.alpha * p.delta
    )
    return lhs - t / p.tau


@dataclass(frozen=True)
class EscapeTimes:
    t_gd: float
    t_sam: float
    delta_t: float
    delta_t_approx: float


def merged_escape_times(
    s0: float, s_star: float, sigma_F: float, alpha: float, rho: float, tau: float = 1.0
) -> EscapeTimes:
    """Time to go from ``s0`` to ``s_star`` under the early-phase merged ODEs."""
    if not 0 < s0 < s_star:
        raise ValueError("need 0 < s0 < s_star")
    g = sigma_F
    r0, r1 = math.sqrt(s0), math.sqrt(s_star)
    t_gd = tau / g * math.log(r1 / r0)
    t_sam = tau / g * math.log(r1 * (g + rho * alpha * r0) / (r0 * (g + rho * alpha * r1)))
    delta = tau / g * (math.log1p(rho * alpha * r1 / g) - math.log1p(rho * alpha * r0 / g))
    approx = tau * rho * alpha / g**2 * (r1 - r0)
    return EscapeTimes(t_gd, t_sam, delta, approx)
