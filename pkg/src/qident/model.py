"""Simulation of the observed system: linear regression through a quantizer.

The system is ``y_k = phi_k' theta + d_k`` with i.i.d. zero-mean Gaussian
noise ``d_k``.  A sensor with strictly increasing thresholds ``C_1 < ... <
C_m`` reports only the level ``q_k`` in ``0..m`` of the cell containing
``y_k``; cells are right-closed, so ``y == C_i`` maps to level ``i - 1``.

``cell_probs`` evaluates, for a predicted output ``x``, the cell
probabilities ``H_i(x) = F(C_i - x) - F(C_{i-1} - x)`` and the matching
density differences ``h_i(x)`` (with ``F_0 = 0``, ``F_{m+1} = 1`` and
``f_0 = f_{m+1} = 0``).  These drive both the estimators and the
information-bound computations.

Sampling uses the cosine-branch Box-Muller transform on counter-based
Philox uniform streams, so every trial is reproducible from (seed, trial
index) alone and consumes exactly two uniforms per Gaussian variate.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .numerics import DomainError, as_vector

_SQRT_TAU = float(np.sqrt(2.0 * np.pi))

__all__ = [
    "QuantizerSpec",
    "GaussianNoise",
    "BoxDomain",
    "TrueSystem",
    "RegressorStream",
    "quantize",
    "step_system",
    "cell_probs",
    "box_muller",
    "example1_regressors",
    "example1_regressor_block",
    "EXAMPLE1_PHI_BAR",
]


@dataclass(frozen=True)
class QuantizerSpec:
    """Ordered sensor thresholds ``C_1 < ... < C_m`` (all finite, m >= 1)."""

    thresholds: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(c) for c in self.thresholds)
        if len(vals) < 1:
            raise DomainError("a quantizer needs at least one threshold")
        if not all(np.isfinite(vals)):
            raise DomainError("thresholds must be finite")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise DomainError("thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", vals)

    @property
    def m(self) -> int:
        return len(self.thresholds)

    @property
    def levels(self) -> int:
        """Number of reportable levels, ``m + 1``."""
        return len(self.thresholds) + 1

    @cached_property
    def _arr(self) -> np.ndarray:
        return np.asarray(self.thresholds, dtype=np.float64)


@dataclass(frozen=True)
class GaussianNoise:
    """Zero-median Gaussian noise model with standard deviation ``sigma``."""

    sigma: float

    def __post_init__(self):
        s = float(self.sigma)
        if not np.isfinite(s) or s <= 0.0:
            raise DomainError(f"sigma must be finite and positive, got {s}")
        object.__setattr__(self, "sigma", s)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Draw noise values; scalar when ``size`` is None."""
        return self.sigma * box_muller(rng, size)


def box_muller(rng: np.random.Generator, size: int | None = None):
    """Standard normal draws via the cosine branch of Box-Muller.

    Consumes exactly two uniforms per variate, so block draws and repeated
    scalar draws walk the underlying stream identically.
    """
    if size is None:
        u = rng.random(2)
        return float(np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1]))
    u = rng.random((int(size), 2))
    return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned closed box, the prior set for the unknown parameter."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) == 0 or len(lo) != len(hi):
            raise DomainError("box bounds must be equal-length and non-empty")
        if not (all(np.isfinite(lo)) and all(np.isfinite(hi))):
            raise DomainError("box bounds must be finite")
        if any(a > b for a, b in zip(lo, hi)):
            raise DomainError("box has lo > hi in some coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @cached_property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @cached_property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    @property
    def theta_bar(self) -> float:
        """Largest Euclidean norm over the box corners."""
        return float(np.sqrt(np.sum(np.maximum(self.lo_arr**2, self.hi_arr**2))))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo_arr + self.hi_arr)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = as_vector(x, self.dim)
        return bool(np.all(x >= self.lo_arr - tol) and np.all(x <= self.hi_arr + tol))

    def clip(self, x) -> np.ndarray:
        return np.clip(as_vector(x, self.dim), self.lo_arr, self.hi_arr)


@dataclass(frozen=True, eq=False)
class TrueSystem:
    """Ground truth used only by the simulator and the bound computations.

    ``theta`` is the constant unknown parameter; membership in the prior box
    is validated where the box is known (experiment configuration).
    """

    theta: np.ndarray
    noise: GaussianNoise
    quantizer: QuantizerSpec

    def __post_init__(self):
        theta = as_vector(self.theta).copy()
        if not np.all(np.isfinite(theta)):
            raise DomainError("theta must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def dim(self) -> int:
        return self.theta.size


def quantize(y: float, sensor: QuantizerSpec) -> int:
    """Level of the threshold cell containing ``y``.

    Cells are right-closed: level 0 is ``y <= C_1``, level i is
    ``C_i < y <= C_{i+1}``, level m is ``y > C_m``.
    """
    y = float(y)
    if not np.isfinite(y):
        raise DomainError(f"y must be finite, got {y}")
    # number of thresholds strictly below y
    return int(np.searchsorted(sensor._arr, y, side="left"))


def step_system(
    sys: TrueSystem, phi, rng: np.random.Generator
) -> tuple[int, float]:
    """Advance the true system one step: returns ``(q, y_hidden)``.

    ``y_hidden`` is exposed for test oracles only; estimators must consume
    just the level ``q``.
    """
    phi = as_vector(phi, sys.dim)
    y = float(phi @ sys.theta) + sys.noise.sample(rng)
    return quantize(y, sys.quantizer), y


def cell_probs(x, sensor: QuantizerSpec, noise: GaussianNoise):
    """Cell probabilities ``H_i(x)`` and density differences ``h_i(x)``.

    Accepts a scalar ``x`` (returns two length ``m + 1`` arrays) or a 1-d
    array of points (returns two ``(len(x), m + 1)`` arrays).  Each cell is
    evaluated on whichever Gaussian tail keeps precision, so ``H_i > 0``
    holds for standardized offsets up to ~37 sigma (past that the tail
    probability falls below the smallest double and rounds to zero, which
    is what the probability floor in the consumers guards); ``sum(H) = 1``
    and ``sum(h) = 0`` hold to a few ulp per cell.
    """
    scalar = np.ndim(x) == 0
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(xs)):
        raise DomainError("x must be finite")
    t = (sensor._arr[None, :] - xs[:, None]) / noise.sigma  # standardized offsets (T, m)

    fvals = np.exp(-0.5 * t * t) / (noise.sigma * _SQRT_TAU)  # f(C_i - x)
    h = np.diff(fvals, axis=1, prepend=0.0, append=0.0)  # telescopes exactly

    cdf = ndtr(t)
    cdfc = ndtr(-t)
    T_ = xs.size
    zero = np.zeros((T_, 1))
    one = np.ones((T_, 1))
    # H via the lower tail (good left of x) and via the upper tail (good right of x)
    H_left = np.hstack([cdf, one]) - np.hstack([zero, cdf])
    H_right = np.hstack([one, cdfc]) - np.hstack([cdfc, zero])
    # branch by the sign of the cell midpoint; end cells are forced to their tail
    mid = np.hstack([-one, t[:, :-1] + t[:, 1:], one])
    H = np.where(mid <= 0.0, H_left, H_right)

    if scalar:
        return H[0], h[0]
    return H, h


# ---------------------------------------------------------------------------
# Regressor streams
# ---------------------------------------------------------------------------

_EXAMPLE1_BASE = np.array([-2.0, 0.0, 0.5])
_EXAMPLE1_JITTER = 0.1

# |u| <= 2.1 termwise, so |phi| <= sqrt(1 + 2 * 2.1^2)
EXAMPLE1_PHI_BAR = float(np.sqrt(1.0 + 2.0 * 2.1**2))


def _example1_u(count: int, rng: np.random.Generator) -> np.ndarray:
    """Inputs u_0..u_{count-1}: base cycle (-2, 0, 0.5) plus Uniform[0, 0.1]."""
    idx = np.arange(count)
    return _EXAMPLE1_BASE[idx % 3] + _EXAMPLE1_JITTER * rng.random(count)


def example1_regressors(k: int, rng: np.random.Generator) -> np.ndarray:
    """Regressor ``phi_k = [1, u_k, u_{k-1}]`` of the third-order preset.

    Consumes the stream from its start, so ``rng`` must be fresh; use
    ``example1_regressor_block`` to materialize a whole horizon at once.
    """
    k = int(k)
    if k < 1:
        raise DomainError("step index k must be >= 1")
    u = _example1_u(k + 1, rng)
    return np.array([1.0, u[k], u[k - 1]])


def example1_regressor_block(k_max: int, rng: np.random.Generator) -> np.ndarray:
    """Rows ``phi_1 .. phi_{k_max}`` of the third-order preset, shape (k_max, 3)."""
    k_max = int(k_max)
    if k_max < 1:
        raise DomainError("k_max must be >= 1")
    u = _example1_u(k_max + 1, rng)
    return np.column_stack([np.ones(k_max), u[1:], u[:-1]])


@dataclass(frozen=True, eq=False)
class RegressorStream:
    """Source of bounded persistently exciting regressors.

    Kinds: ``example1`` (the third-order preset above), ``fixed`` (cycle
    through a given list of vectors), ``user`` (arbitrary block factory).
    Every emitted block is checked against the norm bound ``phi_bar``.
    """

    kind: str
    dim: int
    phi_bar: float
    sequence: np.ndarray | None = None
    factory: Callable[[int, np.random.Generator], np.ndarray] | None = None

    @classmethod
    def example1(cls) -> "RegressorStream":
        return cls(kind="example1", dim=3, phi_bar=EXAMPLE1_PHI_BAR)

    @classmethod
    def fixed(cls, vectors) -> "RegressorStream":
        seq = np.asarray(vectors, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise DomainError("fixed stream needs a (count, dim) array of vectors")
        if not np.all(np.isfinite(seq)):
            raise DomainError("fixed stream vectors must be finite")
        bound = float(np.max(np.linalg.norm(seq, axis=1)))
        return cls(kind="fixed", dim=seq.shape[1], phi_bar=bound, sequence=seq)

    @classmethod
    def user(cls, dim: int, phi_bar: float, factory) -> "RegressorStream":
        return cls(kind="user", dim=int(dim), phi_bar=float(phi_bar), factory=factory)

    def block(self, k_max: int, rng: np.random.Generator) -> np.ndarray:
        """Regressors ``phi_1 .. phi_{k_max}`` as a (k_max, dim) array."""
        k_max = int(k_max)
        if k_max < 1:
            raise DomainError("k_max must be >= 1")
        if self.kind == "example1":
            out = example1_regressor_block(k_max, rng)
        elif self.kind == "fixed":
            idx = np.arange(k_max) % self.sequence.shape[0]
            out = self.sequence[idx]
        elif self.kind == "user":
            out = np.asarray(self.factory(k_max, rng), dtype=np.float64)
            if out.shape != (k_max, self.dim):
                raise DomainError(
                    f"user stream returned shape {out.shape}, expected {(k_max, self.dim)}"
                )
        else:
            raise DomainError(f"unknown regressor kind {self.kind!r}")
        norms = np.linalg.norm(out, axis=1)
        if float(norms.max(initial=0.0)) > self.phi_bar * (1.0 + 1e-12):
            raise DomainError("regressor block violates the norm bound phi_bar")
        return out
