"""Monte-Carlo experiment runner.

An experiment executes ``trials`` independent realizations of the simulated
system, feeds each realization's quantized observations to the requested
estimators, and records, at a checkpoint grid of step counts, the estimation
errors, the adaptive estimator's gain trace and the per-trial information
bound.  Results merge into trial-indexed buffers, so aggregation is
independent of worker scheduling; two runs with the same configuration and
seed produce byte-identical output files.

Randomness: trial ``t`` owns two Philox streams keyed by spawn keys
``(t, 0)`` (noise) and ``(t, 1)`` (regressors) under the master seed, so the
streams do not depend on chunking, worker count or completion order.

Trials are dispatched to workers in chunks; inside a chunk all trials
advance in numpy lockstep (the per-step operations vectorize across trials,
and the box projection falls back to per-trial solves for the few candidates
that leave the prior set).  A short-run equivalence test pins the lockstep
kernel to the single-step estimator functions.

Outputs: ``<name>_metrics.csv`` (one row per checkpoint, 12 significant
digits) plus ``<name>_meta.json`` (resolved configuration, its hash, seed,
version; no timestamps).  ``<name>_trace.csv`` optionally logs every step of
trial 0 through the single-step path.
"""

from __future__ import annotations

import json
import hashlib
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._version import __version__
from .crlb import rho
from .estimator import (
    PROB_FLOOR,
    WeightSchedule,
    ibid_step,
    initial_state,
    project,
    validate_wqnp_weights,
    wqnp_step,
)
from .model import (
    BoxDomain,
    GaussianNoise,
    QuantizerSpec,
    RegressorStream,
    TrueSystem,
    cell_probs,
)
from .numerics import DomainError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "AggregateMetrics",
    "EfficiencyReport",
    "default_checkpoints",
    "load_config",
    "config_from_dict",
    "config_as_dict",
    "config_warnings",
    "example1_config",
    "scalar_binary_config",
    "run_experiment",
    "rate_slope",
    "efficiency_report",
    "write_outputs",
    "metrics_csv_text",
    "meta_json_text",
    "trace_csv_text",
    "trial_generators",
]

ESTIMATOR_NAMES = ("wqnp", "ibid")

_CHUNK_TRIALS = 512


class ConfigError(ValueError):
    """Invalid experiment configuration; carries field-level messages."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def default_checkpoints(horizon: int, count: int = 40, first: int = 10) -> tuple[int, ...]:
    """Log-spaced checkpoint grid from ``first`` to ``horizon`` inclusive."""
    horizon = int(horizon)
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    lo = min(first, horizon)
    ks = np.unique(np.rint(np.geomspace(lo, horizon, count)).astype(np.int64))
    ks = ks[(ks >= 1) & (ks <= horizon)]
    if ks[-1] != horizon:
        ks = np.append(ks, horizon)
    return tuple(int(k) for k in ks)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Fully resolved experiment description.

    ``checkpoints`` must be strictly increasing with the last entry equal to
    the horizon (a leading 0 records the initial error).  ``reg_seed``
    optionally decouples the regressor streams from the master seed.
    """

    name: str
    system: TrueSystem
    box: BoxDomain
    regressors: RegressorStream
    estimators: tuple[str, ...]
    wqnp_schedule: WeightSchedule | None
    trials: int
    horizon: int
    seed: int
    checkpoints: tuple[int, ...]
    theta0: np.ndarray
    p0_scale: float
    reg_seed: int | None = None
    outdir: Path | None = None
    jobs: int = 1
    trace: bool = False

    def __post_init__(self):
        errors = []
        n = self.system.dim
        if self.trials < 1:
            errors.append("run.trials: must be >= 1")
        if self.horizon < n:
            errors.append(f"run.horizon: must be >= parameter dimension {n}")
        cps = tuple(int(k) for k in self.checkpoints)
        if len(cps) == 0:
            errors.append("run.checkpoints: must be non-empty")
        else:
            if any(b <= a for a, b in zip(cps, cps[1:])):
                errors.append("run.checkpoints: must be strictly increasing")
            if cps[0] < 0:
                errors.append("run.checkpoints: entries must be >= 0")
            if cps[-1] != self.horizon:
                errors.append("run.checkpoints: last entry must equal run.horizon")
        ests = tuple(self.estimators)
        if not ests:
            errors.append("run.estimators: must request at least one estimator")
        if len(set(ests)) != len(ests):
            errors.append("run.estimators: duplicate estimator")
        for e in ests:
            if e not in ESTIMATOR_NAMES:
                errors.append(f"run.estimators: unknown estimator {e!r}")
        if "wqnp" in ests:
            if self.wqnp_schedule is None:
                errors.append("wqnp: schedule required when the wqnp estimator is requested")
            elif len(self.wqnp_schedule.alphas) != self.system.quantizer.levels:
                errors.append(
                    f"wqnp.alphas: {len(self.wqnp_schedule.alphas)} weights for a sensor "
                    f"with {self.system.quantizer.levels} cells"
                )
        if self.regressors.dim != n:
            errors.append(f"regressors: dimension {self.regressors.dim} != system dimension {n}")
        theta0 = np.asarray(self.theta0, dtype=np.float64)
        if theta0.shape != (n,) or not np.all(np.isfinite(theta0)):
            errors.append("init.theta0: must be a finite vector of the system dimension")
        if not (np.isfinite(self.p0_scale) and self.p0_scale > 0):
            errors.append("init.p0_scale: must be finite and positive")
        if self.box.dim != n:
            errors.append(f"system.box: dimension {self.box.dim} != system dimension {n}")
        elif not self.box.contains(self.system.theta):
            errors.append("system.theta: true parameter must lie in the prior box")
        if self.jobs < 1:
            errors.append("jobs: must be >= 1")
        if errors:
            raise ConfigError(errors)
        object.__setattr__(self, "checkpoints", cps)
        object.__setattr__(self, "estimators", ests)
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "trials", int(self.trials))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(
            self, "outdir", Path(self.outdir) if self.outdir is not None else None
        )

    @property
    def dim(self) -> int:
        return self.system.dim

    @property
    def p0(self) -> np.ndarray:
        return self.p0_scale * np.eye(self.dim)


def _field(errors, d, section, key, caster, default=None, required=False):
    table = d.get(section, {})
    if key not in table:
        if required:
            errors.append(f"{section}.{key}: missing required field")
        return default
    try:
        return caster(table[key])
    except (TypeError, ValueError, DomainError) as exc:
        errors.append(f"{section}.{key}: {exc}")
        return default


def _float_list(v):
    out = [float(x) for x in v]
    if not out:
        raise ValueError("must be a non-empty list of numbers")
    return out


def _str_list(v):
    if isinstance(v, str) or not all(isinstance(x, str) for x in v):
        raise ValueError("must be a list of strings")
    return tuple(v)


def config_from_dict(raw: dict, **overrides) -> ExperimentConfig:
    """Build a validated configuration from a TOML-shaped dictionary.

    Collects every field-level problem before raising, so a ``validate``
    run reports all of them at once.  ``overrides`` replace top-level
    ExperimentConfig fields (name, outdir, jobs, trace, trials, horizon,
    seed, ...) after the dictionary is resolved.
    """
    errors: list[str] = []
    for section in raw:
        if section not in ("system", "regressors", "run", "wqnp", "init"):
            errors.append(f"{section}: unknown section")

    thresholds = _field(errors, raw, "system", "thresholds", _float_list, required=True)
    sigma = _field(errors, raw, "system", "sigma", float, required=True)
    theta = _field(errors, raw, "system", "theta", _float_list, required=True)
    box_lo = _field(errors, raw, "system", "box_lo", _float_list, required=True)
    box_hi = _field(errors, raw, "system", "box_hi", _float_list, required=True)

    kind = _field(errors, raw, "regressors", "kind", str, default="example1")
    reg_seed = _field(errors, raw, "regressors", "seed", int, default=None)
    sequence = _field(errors, raw, "regressors", "sequence", list, default=None)

    trials = _field(errors, raw, "run", "trials", int, default=1)
    horizon = _field(errors, raw, "run", "horizon", int, required=True)
    seed = _field(errors, raw, "run", "seed", int, default=0)
    name = _field(errors, raw, "run", "name", str, default="experiment")
    estimators = _field(errors, raw, "run", "estimators", _str_list, default=("wqnp", "ibid"))
    checkpoints = _field(errors, raw, "run", "checkpoints", _float_list, default=None)

    alphas = _field(errors, raw, "wqnp", "alphas", _float_list, default=None)
    beta = _field(errors, raw, "wqnp", "beta", float, default=None)

    theta0 = _field(errors, raw, "init", "theta0", _float_list, default=None)
    p0_scale = _field(errors, raw, "init", "p0_scale", float, default=3.0)

    sensor = noise = box = system = None
    if thresholds is not None:
        try:
            sensor = QuantizerSpec(tuple(thresholds))
        except DomainError as exc:
            errors.append(f"system.thresholds: {exc}")
    if sigma is not None:
        try:
            noise = GaussianNoise(sigma)
        except DomainError as exc:
            errors.append(f"system.sigma: {exc}")
    if box_lo is not None and box_hi is not None:
        try:
            box = BoxDomain(tuple(box_lo), tuple(box_hi))
        except DomainError as exc:
            errors.append(f"system.box: {exc}")
    if theta is not None and noise is not None and sensor is not None:
        try:
            system = TrueSystem(np.asarray(theta), noise, sensor)
        except DomainError as exc:
            errors.append(f"system.theta: {exc}")

    stream = None
    if kind == "example1":
        stream = RegressorStream.example1()
    elif kind == "fixed":
        if sequence is None:
            errors.append("regressors.sequence: required for kind = 'fixed'")
        else:
            try:
                stream = RegressorStream.fixed(sequence)
            except DomainError as exc:
                errors.append(f"regressors.sequence: {exc}")
    elif kind is not None:
        errors.append(f"regressors.kind: unknown kind {kind!r} (example1 | fixed)")

    schedule = None
    if "wqnp" in tuple(estimators or ()):
        if alphas is None or beta is None:
            errors.append("wqnp: alphas and beta are required for the wqnp estimator")
        else:
            try:
                schedule = WeightSchedule.constant(alphas, beta)
            except DomainError as exc:
                errors.append(f"wqnp.alphas/beta: {exc}")

    if errors:
        raise ConfigError(errors)

    if checkpoints is None:
        cps = default_checkpoints(int(overrides.get("horizon", horizon)))
    else:
        cps = tuple(int(k) for k in checkpoints)
        if "horizon" in overrides:
            raise ConfigError(
                ["run.horizon: cannot be overridden when explicit checkpoints are configured"]
            )

    if theta0 is None:
        theta0 = box.center
    kwargs = dict(
        name=name,
        system=system,
        box=box,
        regressors=stream,
        estimators=tuple(estimators),
        wqnp_schedule=schedule,
        trials=trials,
        horizon=horizon,
        seed=seed,
        checkpoints=cps,
        theta0=np.asarray(theta0),
        p0_scale=p0_scale,
        reg_seed=reg_seed,
    )
    kwargs.update(overrides)
    if "horizon" in overrides and checkpoints is None:
        kwargs["checkpoints"] = default_checkpoints(int(overrides["horizon"]))
    return ExperimentConfig(**kwargs)


def load_config(path, **overrides) -> ExperimentConfig:
    """Parse a TOML configuration file and build the experiment."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    if "name" not in overrides:
        overrides["name"] = raw.get("run", {}).get("name", Path(path).stem)
    return config_from_dict(raw, **overrides)


def config_as_dict(cfg: ExperimentConfig) -> dict:
    """Resolved configuration as a plain TOML-shaped dictionary."""
    d = {
        "system": {
            "thresholds": list(cfg.system.quantizer.thresholds),
            "sigma": cfg.system.noise.sigma,
            "theta": [float(v) for v in cfg.system.theta],
            "box_lo": list(cfg.box.lo),
            "box_hi": list(cfg.box.hi),
        },
        "regressors": {"kind": cfg.regressors.kind},
        "run": {
            "name": cfg.name,
            "trials": cfg.trials,
            "horizon": cfg.horizon,
            "seed": cfg.seed,
            "estimators": list(cfg.estimators),
            "checkpoints": list(cfg.checkpoints),
        },
        "init": {
            "theta0": [float(v) for v in cfg.theta0],
            "p0_scale": cfg.p0_scale,
        },
    }
    if cfg.reg_seed is not None:
        d["regressors"]["seed"] = cfg.reg_seed
    if cfg.regressors.kind == "fixed":
        d["regressors"]["sequence"] = cfg.regressors.sequence.tolist()
    if cfg.wqnp_schedule is not None:
        d["wqnp"] = {
            "alphas": list(cfg.wqnp_schedule.alphas),
            "beta": cfg.wqnp_schedule.beta,
        }
    return d


def config_warnings(cfg: ExperimentConfig) -> list[str]:
    """Advisory findings that do not block a run."""
    warnings: list[str] = []
    if not cfg.box.contains(cfg.theta0):
        warnings.append(
            "init.theta0 lies outside the prior box; the first projected step pulls it in"
        )
    if cfg.wqnp_schedule is not None:
        report = validate_wqnp_weights(
            cfg.wqnp_schedule,
            cfg.box,
            cfg.regressors.phi_bar,
            cfg.system.quantizer,
            cfg.system.noise,
            cfg.dim,
        )
        for msg in report.failures:
            warnings.append(f"wqnp schedule: {msg}")
    return warnings


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def example1_config(**overrides) -> ExperimentConfig:
    """Third-order preset: four-level sensor, cyclic jittered inputs.

    theta = (-0.5, 1, -1) in the box [-3,3]x[0,2]x[-2,0], noise sigma 1.5,
    thresholds (-1, 0, 0.5), constant weights (1, 8, 14, 20) with beta 0.5,
    initial estimate (0.5, 0.5, 0.5), initial gain 3I, 500 trials.
    """
    base = dict(
        name="example1",
        system=TrueSystem(
            np.array([-0.5, 1.0, -1.0]),
            GaussianNoise(1.5),
            QuantizerSpec((-1.0, 0.0, 0.5)),
        ),
        box=BoxDomain((-3.0, 0.0, -2.0), (3.0, 2.0, 0.0)),
        regressors=RegressorStream.example1(),
        estimators=("wqnp", "ibid"),
        wqnp_schedule=WeightSchedule.constant((1.0, 8.0, 14.0, 20.0), 0.5),
        trials=500,
        horizon=10_000,
        seed=0,
        theta0=np.array([0.5, 0.5, 0.5]),
        p0_scale=3.0,
    )
    base.update(overrides)
    if "checkpoints" not in base:
        base["checkpoints"] = default_checkpoints(base["horizon"])
    return ExperimentConfig(**base)


def scalar_binary_config(**overrides) -> ExperimentConfig:
    """Scalar preset: binary sensor at zero, unit noise, constant regressor 1."""
    base = dict(
        name="scalar_binary",
        system=TrueSystem(
            np.array([0.0]), GaussianNoise(1.0), QuantizerSpec((0.0,))
        ),
        box=BoxDomain((-3.0,), (3.0,)),
        regressors=RegressorStream.fixed([[1.0]]),
        estimators=("ibid",),
        wqnp_schedule=None,
        trials=2000,
        horizon=2000,
        seed=0,
        theta0=np.array([0.0]),
        p0_scale=3.0,
    )
    base.update(overrides)
    if "checkpoints" not in base:
        base["checkpoints"] = default_checkpoints(base["horizon"])
    if "wqnp" in base["estimators"] and base.get("wqnp_schedule") is None:
        base["wqnp_schedule"] = WeightSchedule.constant((-1.0, 1.0), 1.0)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def trial_generators(cfg: ExperimentConfig, trial: int):
    """Independent Philox streams (noise, regressors) for one trial."""
    noise_ss = np.random.SeedSequence(cfg.seed, spawn_key=(trial, 0))
    reg_master = cfg.seed if cfg.reg_seed is None else cfg.reg_seed
    reg_ss = np.random.SeedSequence(reg_master, spawn_key=(trial, 1))
    return (
        np.random.Generator(np.random.Philox(noise_ss)),
        np.random.Generator(np.random.Philox(reg_ss)),
    )


def _simulate_chunk(cfg: ExperimentConfig, t0: int, t1: int):
    """Regressors and observed levels for trials t0..t1-1."""
    T = t1 - t0
    k_max, n = cfg.horizon, cfg.dim
    theta = cfg.system.theta
    C = np.asarray(cfg.system.quantizer.thresholds)
    Phi = np.empty((T, k_max, n))
    q = np.empty((T, k_max), dtype=np.int64)
    for j, t in enumerate(range(t0, t1)):
        noise_rng, reg_rng = trial_generators(cfg, t)
        Phi[j] = cfg.regressors.block(k_max, reg_rng)
        y = Phi[j] @ theta + cfg.system.noise.sample(noise_rng, k_max)
        q[j] = np.searchsorted(C, y, side="left")
    return Phi, q


def _crlb_pass(cfg: ExperimentConfig, Phi: np.ndarray) -> np.ndarray:
    """Per-trial trace of the information bound at the checkpoints."""
    T, k_max, n = Phi.shape
    theta = cfg.system.theta
    cps = {k: j for j, k in enumerate(cfg.checkpoints)}
    out = np.full((T, len(cfg.checkpoints)), np.nan)
    info = np.zeros((T, n, n))
    sensor, noise = cfg.system.quantizer, cfg.system.noise
    for k in range(1, k_max + 1):
        phik = Phi[:, k - 1, :]
        x_true = np.einsum("ti,i->t", phik, theta)
        r = rho(x_true, sensor, noise)
        info += r[:, None, None] * (phik[:, :, None] * phik[:, None, :])
        j = cps.get(k)
        if j is not None and k >= n:
            try:
                out[:, j] = np.trace(np.linalg.inv(info), axis1=1, axis2=2)
            except np.linalg.LinAlgError:
                for t in range(T):
                    try:
                        out[t, j] = np.trace(np.linalg.inv(info[t]))
                    except np.linalg.LinAlgError:
                        pass
    return out


def _estimator_pass(cfg: ExperimentConfig, est: str, Phi: np.ndarray, q: np.ndarray):
    """Run one estimator over a chunk of trials in lockstep.

    Returns estimation errors at the checkpoints, shape (T, K, n), and for
    the adaptive estimator also the gain trace, shape (T, K).
    """
    T, k_max, n = Phi.shape
    theta = cfg.system.theta
    sensor, noise, box = cfg.system.quantizer, cfg.system.noise, cfg.box
    lo, hi = box.lo_arr, box.hi_arr
    cps = {k: j for j, k in enumerate(cfg.checkpoints)}
    K = len(cfg.checkpoints)

    state0 = initial_state(cfg.theta0, cfg.p0)
    theta_hat = np.tile(state0.theta_hat, (T, 1))
    P = np.tile(state0.P, (T, 1, 1))
    P_inv = np.tile(state0.P_inv, (T, 1, 1))

    if est == "wqnp":
        alphas = cfg.wqnp_schedule.alphas_arr
        beta_const = cfg.wqnp_schedule.beta
    elif est != "ibid":
        raise DomainError(f"unknown estimator {est!r}")

    err = np.full((T, K, n), np.nan)
    tracep = np.full((T, K), np.nan) if est == "ibid" else None

    def record(j):
        err[:, j, :] = theta_hat - theta[None, :]
        if tracep is not None:
            tracep[:, j] = np.trace(P, axis1=1, axis2=2)

    if 0 in cps:
        record(cps[0])

    rows = np.arange(T)
    for k in range(1, k_max + 1):
        phik = Phi[:, k - 1, :]
        qk = q[:, k - 1]
        x_hat = np.einsum("ti,ti->t", phik, theta_hat)
        H, h = cell_probs(x_hat, sensor, noise)
        if est == "ibid":
            Hc = np.maximum(H, PROB_FLOOR)
            al = -h / Hc
            beta = np.sum(h * (h / Hc), axis=1)
            s_tilde = al[rows, qk]
        else:
            beta = beta_const
            s_tilde = alphas[qk] - H @ alphas

        w = np.einsum("tij,tj->ti", P, phik)
        quad = np.einsum("ti,ti->t", phik, w)
        a = 1.0 / (1.0 + beta * quad)
        if not np.all((a > 0.0) & (a <= 1.0)):
            raise ArithmeticError(f"step gain left (0, 1] at step {k}")
        cand = theta_hat + (a * s_tilde)[:, None] * w
        P = P - (a * beta)[:, None, None] * (w[:, :, None] * w[:, None, :])
        if np.isscalar(beta) or np.ndim(beta) == 0:
            P_inv = P_inv + beta * (phik[:, :, None] * phik[:, None, :])
        else:
            P_inv = P_inv + beta[:, None, None] * (phik[:, :, None] * phik[:, None, :])

        inside = np.all((cand >= lo) & (cand <= hi), axis=1)
        if not inside.all():
            for t in np.flatnonzero(~inside):
                cand[t] = project(cand[t], P_inv[t], box)
        theta_hat = cand
        if not (np.all(theta_hat >= lo) and np.all(theta_hat <= hi)):
            raise ArithmeticError(f"estimate left the prior box at step {k}")

        j = cps.get(k)
        if j is not None:
            record(j)
    return err, tracep


def _run_chunk(cfg: ExperimentConfig, t0: int, t1: int) -> dict:
    Phi, q = _simulate_chunk(cfg, t0, t1)
    out = {"t0": t0, "t1": t1, "trace_crlb": _crlb_pass(cfg, Phi), "err": {}, "trace_phat": None}
    for est in cfg.estimators:
        err, tracep = _estimator_pass(cfg, est, Phi, q)
        out["err"][est] = err
        if tracep is not None:
            out["trace_phat"] = tracep
    return out


@dataclass(frozen=True, eq=False)
class AggregateMetrics:
    """Per-checkpoint aggregates over all trials.

    ``err[est]`` keeps the raw per-trial estimation errors, shape
    (trials, checkpoints, dim); everything else derives from it, so paired
    comparisons across estimators stay possible downstream.
    """

    checkpoints: np.ndarray
    theta_true: np.ndarray
    horizon: int
    err: dict
    trace_crlb_trials: np.ndarray
    trace_phat_trials: np.ndarray | None

    @property
    def estimators(self) -> tuple[str, ...]:
        return tuple(self.err.keys())

    def sq_err(self, est: str) -> np.ndarray:
        """Per-trial squared error norms, shape (trials, checkpoints)."""
        return np.sum(self.err[est] ** 2, axis=2)

    def mse(self, est: str) -> np.ndarray:
        return self.sq_err(est).mean(axis=0)

    def se_mse(self, est: str) -> np.ndarray:
        """Standard error of the squared-error mean across trials."""
        sq = self.sq_err(est)
        T = sq.shape[0]
        if T < 2:
            return np.full(sq.shape[1], np.nan)
        return sq.std(axis=0, ddof=1) / np.sqrt(T)

    def k_mse(self, est: str) -> np.ndarray:
        return self.checkpoints * self.mse(est)

    def bias(self, est: str) -> np.ndarray:
        """Mean estimation error per coordinate, shape (checkpoints, dim)."""
        return self.err[est].mean(axis=0)

    @property
    def trace_crlb(self) -> np.ndarray:
        # nan marks checkpoints before the information matrix fills up
        vals = self.trace_crlb_trials
        good = ~np.isnan(vals)
        counts = good.sum(axis=0)
        out = np.full(vals.shape[1], np.nan)
        nz = counts > 0
        out[nz] = np.where(good, vals, 0.0).sum(axis=0)[nz] / counts[nz]
        return out

    @property
    def k_trace_crlb(self) -> np.ndarray:
        return self.checkpoints * self.trace_crlb

    @property
    def mean_trace_phat(self) -> np.ndarray | None:
        if self.trace_phat_trials is None:
            return None
        return self.trace_phat_trials.mean(axis=0)


def run_experiment(cfg: ExperimentConfig, chunk_trials: int = _CHUNK_TRIALS) -> AggregateMetrics:
    """Execute all trials and aggregate; writes output files when configured.

    Workers receive contiguous trial chunks; buffers are pre-sized and filled
    by trial index, so the result does not depend on ``jobs``, chunk size or
    completion order.
    """
    T, K, n = cfg.trials, len(cfg.checkpoints), cfg.dim
    err = {est: np.empty((T, K, n)) for est in cfg.estimators}
    trace_crlb = np.empty((T, K))
    trace_phat = np.empty((T, K)) if "ibid" in cfg.estimators else None

    chunks = [(lo, min(lo + max(1, int(chunk_trials)), T)) for lo in range(0, T, max(1, int(chunk_trials)))]

    def merge(res):
        sl = slice(res["t0"], res["t1"])
        trace_crlb[sl] = res["trace_crlb"]
        for est in cfg.estimators:
            err[est][sl] = res["err"][est]
        if trace_phat is not None:
            trace_phat[sl] = res["trace_phat"]

    if cfg.jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_run_chunk, cfg, lo, hi) for lo, hi in chunks]
            for fut in as_completed(futures):
                merge(fut.result())
    else:
        for lo, hi in chunks:
            merge(_run_chunk(cfg, lo, hi))

    metrics = AggregateMetrics(
        checkpoints=np.asarray(cfg.checkpoints, dtype=np.int64),
        theta_true=cfg.system.theta,
        horizon=cfg.horizon,
        err=err,
        trace_crlb_trials=trace_crlb,
        trace_phat_trials=trace_phat,
    )
    if cfg.outdir is not None:
        write_outputs(cfg, metrics)
    return metrics


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------


def rate_slope(metrics: AggregateMetrics, est: str, window: tuple[float, float] | None = None) -> float:
    """Least-squares slope of log(mse) against log(k) over a window.

    Default window is the last decade, ``[horizon / 10, horizon]``; at least
    five checkpoints must fall inside it.
    """
    if window is None:
        window = (metrics.horizon / 10.0, float(metrics.horizon))
    k = metrics.checkpoints.astype(np.float64)
    mse = metrics.mse(est)
    mask = (k >= window[0]) & (k <= window[1]) & (k > 0) & (mse > 0)
    if int(mask.sum()) < 5:
        raise DomainError(
            f"need at least 5 checkpoints with positive mse in the window, got {int(mask.sum())}"
        )
    return float(np.polyfit(np.log(k[mask]), np.log(mse[mask]), 1)[0])


@dataclass(frozen=True, eq=False)
class EfficiencyReport:
    """Efficiency ratios per checkpoint; both sequences are expected to -> 1.

    ``r1[est] = k*mse / (k*trace(bound))`` and ``r2 = trace(mean gain) /
    trace(bound)`` for the adaptive estimator.
    """

    checkpoints: np.ndarray
    r1: dict
    r2: np.ndarray | None


def efficiency_report(metrics: AggregateMetrics) -> EfficiencyReport:
    if "ibid" not in metrics.estimators:
        raise DomainError("efficiency report requires the adaptive estimator in the run")
    with np.errstate(invalid="ignore", divide="ignore"):
        r1 = {est: metrics.mse(est) / metrics.trace_crlb for est in metrics.estimators}
        r2 = None
        if metrics.mean_trace_phat is not None:
            r2 = metrics.mean_trace_phat / metrics.trace_crlb
    return EfficiencyReport(checkpoints=metrics.checkpoints, r1=r1, r2=r2)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        return "nan"
    return format(float(v), ".12g")


def metrics_csv_text(cfg: ExperimentConfig, metrics: AggregateMetrics) -> str:
    """Render the metrics table; 12 significant digits, one row per checkpoint."""
    ests = list(cfg.estimators)
    cols = ["k"]
    cols += [f"mse_{e}" for e in ests]
    cols += [f"k_mse_{e}" for e in ests]
    cols += ["k_trace_crlb"]
    if "ibid" in ests:
        cols += ["mean_trace_phat"]
    cols += ["trace_crlb"]
    cols += [f"se_mse_{e}" for e in ests]
    for e in ests:
        cols += [f"bias_{e}_{i + 1}" for i in range(cfg.dim)]

    mse = {e: metrics.mse(e) for e in ests}
    k_mse = {e: metrics.k_mse(e) for e in ests}
    se = {e: metrics.se_mse(e) for e in ests}
    bias = {e: metrics.bias(e) for e in ests}
    k_tr = metrics.k_trace_crlb
    tr = metrics.trace_crlb
    trp = metrics.mean_trace_phat

    lines = [",".join(cols)]
    for j, k in enumerate(metrics.checkpoints):
        row = [str(int(k))]
        row += [_fmt(mse[e][j]) for e in ests]
        row += [_fmt(k_mse[e][j]) for e in ests]
        row += [_fmt(k_tr[j])]
        if "ibid" in ests:
            row += [_fmt(trp[j])]
        row += [_fmt(tr[j])]
        row += [_fmt(se[e][j]) for e in ests]
        for e in ests:
            row += [_fmt(bias[e][j, i]) for i in range(cfg.dim)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def config_sha256(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_as_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def meta_json_text(cfg: ExperimentConfig) -> str:
    meta = {
        "name": cfg.name,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "horizon": cfg.horizon,
        "estimators": list(cfg.estimators),
        "config": config_as_dict(cfg),
        "config_sha256": config_sha256(cfg),
        "version": __version__,
        "float_digits": 12,
    }
    return json.dumps(meta, sort_keys=True, indent=2) + "\n"


def trace_csv_text(cfg: ExperimentConfig, trial: int = 0) -> str:
    """Per-step log of one designated trial through the single-step path."""
    noise_rng, reg_rng = trial_generators(cfg, trial)
    Phi = cfg.regressors.block(cfg.horizon, reg_rng)
    y = Phi @ cfg.system.theta + cfg.system.noise.sample(noise_rng, cfg.horizon)
    C = np.asarray(cfg.system.quantizer.thresholds)
    q = np.searchsorted(C, y, side="left")

    levels = cfg.system.quantizer.levels
    cols = ["estimator", "k", "q", "s", "s_tilde", "a", "beta"]
    cols += [f"alpha_{i + 1}" for i in range(levels)]
    cols += [f"theta_hat_{i + 1}" for i in range(cfg.dim)]
    lines = [",".join(cols)]
    sensor, noise, box = cfg.system.quantizer, cfg.system.noise, cfg.box
    for est in cfg.estimators:
        state = initial_state(cfg.theta0, cfg.p0)
        for k in range(1, cfg.horizon + 1):
            if est == "wqnp":
                state, rec = wqnp_step(
                    state, Phi[k - 1], int(q[k - 1]), cfg.wqnp_schedule, sensor, noise, box
                )
            else:
                state, rec = ibid_step(state, Phi[k - 1], int(q[k - 1]), sensor, noise, box)
            row = [est, str(rec.k), str(rec.q), _fmt(rec.s), _fmt(rec.s_tilde), _fmt(rec.a), _fmt(rec.beta)]
            row += [_fmt(v) for v in rec.alphas]
            row += [_fmt(v) for v in state.theta_hat]
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_outputs(cfg: ExperimentConfig, metrics: AggregateMetrics) -> list[Path]:
    """Write ``<name>_metrics.csv``, ``<name>_meta.json`` and optional trace."""
    outdir = Path(cfg.outdir if cfg.outdir is not None else os.environ.get("QIDENT_OUTDIR", "."))
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    p = outdir / f"{cfg.name}_metrics.csv"
    p.write_text(metrics_csv_text(cfg, metrics))
    paths.append(p)
    p = outdir / f"{cfg.name}_meta.json"
    p.write_text(meta_json_text(cfg))
    paths.append(p)
    if cfg.trace:
        p = outdir / f"{cfg.name}_trace.csv"
        p.write_text(trace_csv_text(cfg))
        paths.append(p)
    return paths
