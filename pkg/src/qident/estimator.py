"""Recursive estimators driven by quantized observations.

Both step rules share one skeleton.  Given the previous estimate with gain
matrix ``P`` and a fresh regressor ``phi`` and observed level ``q``:

1. convert the level to a weight ``s = alpha[q + 1]`` (cells indexed 1..m+1),
2. form the innovation ``s_tilde = s - sum_i alpha_i * H_i(phi' theta_hat)``,
3. downdate the gain, ``a = 1 / (1 + beta * phi' P phi)`` and
   ``P <- P - a * beta * (P phi)(P phi)'``,
4. move to ``theta_hat + a * P_prev phi * s_tilde`` and project the result
   onto the prior box in the norm induced by the updated inverse gain.

The constant-weight rule (``wqnp_step``) takes a user schedule ``(alphas,
beta)``.  The adaptive rule (``ibid_step``) recomputes, at every step, the
score-matched weights ``alpha_i = -h_i / H_i`` and ``beta = sum h_i^2 / H_i``
evaluated at the current output prediction; with those weights the predicted
mean of ``s`` vanishes, so the innovation is the converted observation
itself.

The inverse gain is never obtained by inverting ``P``: the update keeps a
shadow accumulator ``P_inv = P0^{-1} + sum beta_l phi_l phi_l'``, which the
rank-one identity makes exact, and the projection metric reads from it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .model import BoxDomain, GaussianNoise, QuantizerSpec, cell_probs
from .numerics import (
    DomainError,
    as_sym_matrix,
    as_vector,
    gauss_pdf,
    rank_one_downdate,
    sym_invert,
    sym_solve,
)

__all__ = [
    "PROB_FLOOR",
    "WeightSchedule",
    "EstimatorState",
    "StepRecord",
    "WeightValidationReport",
    "initial_state",
    "convert",
    "innovation",
    "project",
    "wqnp_step",
    "ibid_weights",
    "ibid_step",
    "validate_wqnp_weights",
]

# Cell probabilities are analytically positive; this floor only guards the
# divisions in the adaptive weights against floating-point underflow at
# extreme predictions.  It never binds for predictions reachable inside the
# prior box with bounded regressors.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class WeightSchedule:
    """Weight coefficients for the constant-weight estimator.

    ``kind`` is "constant" (user-chosen ``alphas``/``beta``) or "adaptive"
    (both None; the step rule recomputes them).  Constant schedules must have
    strictly increasing finite alphas and a positive finite beta.
    """

    kind: str
    alphas: tuple[float, ...] | None = None
    beta: float | None = None

    def __post_init__(self):
        if self.kind == "adaptive":
            if self.alphas is not None or self.beta is not None:
                raise DomainError("adaptive schedules carry no coefficients")
            return
        if self.kind != "constant":
            raise DomainError(f"unknown schedule kind {self.kind!r}")
        if self.alphas is None or self.beta is None:
            raise DomainError("constant schedules need alphas and beta")
        alphas = tuple(float(a) for a in self.alphas)
        beta = float(self.beta)
        if len(alphas) < 2:
            raise DomainError("need at least two weight coefficients (binary sensor)")
        if not all(np.isfinite(alphas)):
            raise DomainError("alphas must be finite")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise DomainError("alphas must be strictly increasing")
        if not np.isfinite(beta) or beta <= 0.0:
            raise DomainError(f"beta must be finite and positive, got {beta}")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def constant(cls, alphas: Sequence[float], beta: float) -> "WeightSchedule":
        return cls(kind="constant", alphas=tuple(alphas), beta=beta)

    @classmethod
    def adaptive(cls) -> "WeightSchedule":
        return cls(kind="adaptive")

    @property
    def gap(self) -> float:
        """Spread ``alpha_{m+1} - alpha_1`` of a constant schedule."""
        return self.alphas[-1] - self.alphas[0]

    @cached_property
    def alphas_arr(self) -> np.ndarray:
        return np.asarray(self.alphas, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class EstimatorState:
    """Estimate, gain matrix, shadow inverse gain and step counter.

    After any projected step ``theta_hat`` lies in the prior box; the
    configured initial estimate is taken as given even if it starts outside
    (the first projection pulls it in).  ``P @ P_inv`` stays within relative
    1e-8 of the identity over long runs; tests assert it.
    """

    theta_hat: np.ndarray
    P: np.ndarray
    P_inv: np.ndarray
    k: int


def initial_state(theta0, P0) -> EstimatorState:
    theta0 = as_vector(theta0)
    P0 = as_sym_matrix(P0, theta0.size)
    return EstimatorState(theta_hat=theta0, P=P0, P_inv=sym_invert(P0), k=0)


@dataclass(frozen=True)
class StepRecord:
    """Per-step trace: observed level, conversion, innovation and gains."""

    k: int
    q: int
    s: float
    s_tilde: float
    a: float
    alphas: tuple[float, ...]
    beta: float


def convert(q: int, alphas) -> float:
    """Weight of the observed cell: ``alpha_{q+1}`` with cells indexed 1..m+1."""
    alphas = np.asarray(alphas, dtype=np.float64)
    q = int(q)
    if q < 0 or q >= alphas.size:
        raise DomainError(f"level {q} outside 0..{alphas.size - 1}")
    return float(alphas[q])


def innovation(q: int, alphas, H_hat) -> float:
    """Converted observation minus its predicted mean under ``H_hat``."""
    alphas = np.asarray(alphas, dtype=np.float64)
    H_hat = np.asarray(H_hat, dtype=np.float64)
    if alphas.shape != H_hat.shape:
        raise DomainError(
            f"alphas length {alphas.size} does not match cell count {H_hat.size}"
        )
    return convert(q, alphas) - float(alphas @ H_hat)


def project(x, Q, box: BoxDomain, tol: float = 1e-10) -> np.ndarray:
    """Metric projection of ``x`` onto the box under ``|v|_Q = sqrt(v'Qv)``.

    Exact primal active-set solve of the strictly convex box QP
    ``min_z (z - x)' Q (z - x)``: repeatedly minimize over the free
    coordinates with the bound coordinates pinned, take the longest feasible
    step toward that minimizer, and add/release bounds by their KKT
    multipliers until stationarity.  Interior points return unchanged.
    """
    x = as_vector(x)
    Q = as_sym_matrix(Q, x.size)
    lo, hi = box.lo_arr, box.hi_arr
    if lo.size != x.size:
        raise DomainError(f"box dimension {lo.size} does not match vector {x.size}")
    if np.all(x >= lo) and np.all(x <= hi):
        return x.copy()

    n = x.size
    z = np.clip(x, lo, hi)
    qx = Q @ x
    # -1 pinned at lower bound, +1 at upper, 0 free
    state = np.zeros(n, dtype=np.int8)
    state[z <= lo] = -1
    state[z >= hi] = 1

    for _ in range(16 * n + 16):
        free = state == 0
        d = np.zeros(n)
        if free.any():
            pinned = ~free
            rhs = qx[free] - Q[np.ix_(free, pinned)] @ z[pinned]
            d[free] = sym_solve(Q[np.ix_(free, free)], rhs) - z[free]

        if np.any(d != 0.0):
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hi = np.where(d > 0, (hi - z) / d, np.inf)
                t_lo = np.where(d < 0, (lo - z) / d, np.inf)
            t_bound = np.where(free, np.minimum(t_hi, t_lo), np.inf)
            i_blk = int(np.argmin(t_bound))
            step = min(1.0, float(t_bound[i_blk]))
            z = np.clip(z + step * d, lo, hi)
            if step < 1.0:
                if d[i_blk] > 0:
                    state[i_blk] = 1
                    z[i_blk] = hi[i_blk]
                else:
                    state[i_blk] = -1
                    z[i_blk] = lo[i_blk]
                continue

        # full step taken (free block stationary); check multipliers on bounds
        g = Q @ z - qx  # half-gradient of the objective
        scale = max(1.0, float(np.abs(g).max(initial=0.0)))
        lower_viol = np.where(state == -1, -g, -np.inf)
        upper_viol = np.where(state == 1, g, -np.inf)
        viol = np.maximum(lower_viol, upper_viol)
        i_rel = int(np.argmax(viol))
        if viol[i_rel] <= tol * scale:
            return np.clip(z, lo, hi)
        state[i_rel] = 0

    raise ArithmeticError("box projection active-set iteration failed to converge")


def _step(
    state: EstimatorState,
    phi: np.ndarray,
    q: int,
    alphas: np.ndarray,
    beta: float,
    s_tilde: float,
    box: BoxDomain,
    projected: bool,
) -> tuple[EstimatorState, StepRecord]:
    P_new, a = rank_one_downdate(state.P, phi, beta)
    P_inv_new = state.P_inv + beta * np.outer(phi, phi)
    cand = state.theta_hat + (a * s_tilde) * (state.P @ phi)
    theta_new = project(cand, P_inv_new, box) if projected else cand
    rec = StepRecord(
        k=state.k + 1,
        q=int(q),
        s=convert(q, alphas),
        s_tilde=s_tilde,
        a=a,
        alphas=tuple(float(v) for v in alphas),
        beta=float(beta),
    )
    return EstimatorState(theta_new, P_new, P_inv_new, state.k + 1), rec


def wqnp_step(
    state: EstimatorState,
    phi,
    q: int,
    sched: WeightSchedule,
    sensor: QuantizerSpec,
    noise: GaussianNoise,
    box: BoxDomain,
    *,
    projected: bool = True,
) -> tuple[EstimatorState, StepRecord]:
    """One constant-weight step.

    The gain uses the previous ``P`` while the projection metric is the
    updated inverse; that ordering is load-bearing and tested.  ``projected``
    exists for unprojected-behavior studies only.
    """
    if sched.kind != "constant":
        raise DomainError("wqnp_step needs a constant schedule")
    if len(sched.alphas) != sensor.levels:
        raise DomainError(
            f"schedule has {len(sched.alphas)} weights, sensor has {sensor.levels} cells"
        )
    phi = as_vector(phi, state.theta_hat.size)
    x_hat = float(phi @ state.theta_hat)
    H_hat, _ = cell_probs(x_hat, sensor, noise)
    s_tilde = innovation(q, sched.alphas_arr, H_hat)
    return _step(state, phi, q, sched.alphas_arr, sched.beta, s_tilde, box, projected)


def ibid_weights(
    x_hat, sensor: QuantizerSpec, noise: GaussianNoise, *, floor: float = PROB_FLOOR
):
    """Score-matched weights at the prediction ``x_hat``.

    ``alpha_i = -h_i / H_i`` is strictly increasing in i (the density-ratio
    ordering of adjacent cells) and ``beta = sum_i h_i^2 / H_i`` is the
    single-observation Fisher weight; ``beta == -sum_i alpha_i h_i`` holds by
    construction.  Accepts scalar or batched ``x_hat``.

    The floor clamps cells whose probability falls below ~1e-12 (threshold
    offsets past about 7 sigma); such far-tail cells collapse toward zero
    weight, so the strict ordering is guaranteed only while the floor is
    inert.  Those cells are observed with probability below the floor, so
    the step rule is unaffected.
    """
    H, h = cell_probs(x_hat, sensor, noise)
    Hc = np.maximum(H, floor)
    alphas = -h / Hc
    beta = np.sum(h * (h / Hc), axis=-1)
    if np.ndim(x_hat) == 0:
        return alphas, float(beta)
    return alphas, beta


def ibid_step(
    state: EstimatorState,
    phi,
    q: int,
    sensor: QuantizerSpec,
    noise: GaussianNoise,
    box: BoxDomain,
    *,
    projected: bool = True,
) -> tuple[EstimatorState, StepRecord]:
    """One adaptive-weight step.

    The predicted mean of the converted observation is zero under the
    adaptive weights (``sum alpha_i H_i = -sum h_i = 0``), so the innovation
    is taken as the converted observation directly; the equivalence with the
    subtraction form is a tested invariant.
    """
    phi = as_vector(phi, state.theta_hat.size)
    x_hat = float(phi @ state.theta_hat)
    alphas, beta = ibid_weights(x_hat, sensor, noise)
    s_tilde = convert(q, alphas)
    return _step(state, phi, q, alphas, beta, s_tilde, box, projected)


@dataclass(frozen=True)
class WeightValidationReport:
    """Advisory check of a constant schedule against the convergence conditions.

    ``lhs > rhs`` is the sufficient excitation margin
    ``(2 * gap / beta) * f_min > 1 - 1/n`` with ``f_min`` the smallest noise
    density over the reachable band around each threshold.  Sufficient, not
    necessary: a False never blocks a run.
    """

    ordering_ok: bool
    gap: float
    gap_ok: bool
    beta: float
    beta_ok: bool
    f_min: float
    lhs: float
    rhs: float
    margin_ok: bool
    failures: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.failures


def validate_wqnp_weights(
    sched,
    box: BoxDomain,
    phi_bar: float,
    sensor: QuantizerSpec,
    noise: GaussianNoise,
    n: int | None = None,
) -> WeightValidationReport:
    """Check a constant schedule; accepts a WeightSchedule or ``(alphas, beta)``.

    The reachable output band around each threshold is ``[C_i - B, C_i + B]``
    with ``B = phi_bar * theta_bar``; for a zero-mean Gaussian the density
    minimum over that band sits at the endpoint farthest from zero.
    """
    if isinstance(sched, WeightSchedule):
        if sched.kind != "constant":
            raise DomainError("only constant schedules can be validated")
        alphas, beta = np.asarray(sched.alphas, dtype=float), float(sched.beta)
    else:
        raw_alphas, raw_beta = sched
        alphas, beta = np.asarray(raw_alphas, dtype=float), float(raw_beta)
    if n is None:
        n = box.dim

    failures: list[str] = []
    ordering_ok = alphas.size >= 2 and bool(np.all(np.diff(alphas) > 0))
    if not ordering_ok:
        failures.append("alphas are not strictly increasing")
    gap = float(alphas[-1] - alphas[0]) if alphas.size >= 2 else float("nan")
    gap_ok = bool(gap > 0)
    if not gap_ok:
        failures.append("weight spread alpha_max - alpha_min is not positive")
    beta_ok = bool(np.isfinite(beta) and beta > 0)
    if not beta_ok:
        failures.append("beta is not positive")

    band = phi_bar * box.theta_bar
    worst = np.maximum(np.abs(sensor._arr - band), np.abs(sensor._arr + band))
    f_min = float(np.min(gauss_pdf(worst, noise.sigma)))
    rhs = 1.0 - 1.0 / n
    lhs = (2.0 * gap / beta) * f_min if (gap_ok and beta_ok) else float("nan")
    margin_ok = bool(lhs > rhs)
    if not margin_ok:
        failures.append(
            f"excitation margin fails: (2*gap/beta)*f_min = {lhs:.6g} <= {rhs:.6g}"
        )
    return WeightValidationReport(
        ordering_ok=ordering_ok,
        gap=gap,
        gap_ok=gap_ok,
        beta=beta,
        beta_ok=beta_ok,
        f_min=f_min,
        lhs=lhs,
        rhs=rhs,
        margin_ok=margin_ok,
        failures=tuple(failures),
    )
