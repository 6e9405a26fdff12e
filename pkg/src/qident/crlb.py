"""Cramer-Rao lower bound for multi-threshold quantized observations.

Each observation at regressor ``phi`` with true output ``x = phi' theta``
contributes ``rho(x) * phi phi'`` to the Fisher information, where

    rho(x) = sum_i h_i(x)^2 / H_i(x)

over the sensor cells.  The bound after k steps is the inverse of the
accumulated information.  ``rho`` is at most ``1 / sigma^2`` (the
accurate-measurement Fisher weight) and approaches it as the threshold grid
refines, which quantifies what quantization costs.

The bound is an oracle diagnostic: it is evaluated at the true parameter.
The estimator-side analogue of the inverse information is the adaptive
estimator's own gain matrix, so no estimated variant lives here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import GaussianNoise, QuantizerSpec, cell_probs
from .numerics import DomainError, PositiveDefiniteError, as_vector, sym_invert

__all__ = ["CrlbAccumulator", "rho", "accumulate", "bound", "bound_recursive_check"]

_RHO_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class CrlbAccumulator:
    """Running Fisher information for a fixed sensor/noise model."""

    sensor: QuantizerSpec
    noise: GaussianNoise
    info: np.ndarray
    k: int

    @classmethod
    def start(cls, sensor: QuantizerSpec, noise: GaussianNoise, order: int) -> "CrlbAccumulator":
        order = int(order)
        if order < 1:
            raise DomainError("order must be >= 1")
        return cls(sensor=sensor, noise=noise, info=np.zeros((order, order)), k=0)

    @property
    def order(self) -> int:
        return self.info.shape[0]


def rho(x, sensor: QuantizerSpec, noise: GaussianNoise):
    """Fisher weight of one quantized observation at true output ``x``.

    Scalar in, float out; 1-d array in, array out.  Strictly positive and
    bounded by ``1 / sigma^2``.
    """
    H, h = cell_probs(x, sensor, noise)
    out = np.sum(h * (h / np.maximum(H, _RHO_FLOOR)), axis=-1)
    return float(out) if np.ndim(x) == 0 else out


def accumulate(acc: CrlbAccumulator, phi, x_true: float) -> CrlbAccumulator:
    """Add one observation's information; ``x_true`` must be ``phi' theta``."""
    phi = as_vector(phi, acc.order)
    r = rho(float(x_true), acc.sensor, acc.noise)
    info = acc.info + r * np.outer(phi, phi)
    return CrlbAccumulator(sensor=acc.sensor, noise=acc.noise, info=info, k=acc.k + 1)


def bound(acc: CrlbAccumulator) -> np.ndarray:
    """Lower-bound matrix, the inverse of the accumulated information."""
    try:
        return sym_invert(acc.info)
    except PositiveDefiniteError as err:
        raise PositiveDefiniteError(
            f"information matrix singular after {acc.k} steps "
            f"(insufficient excitation): {err}",
            pivot=err.pivot,
        ) from err


def bound_recursive_check(history, init_info=None) -> float:
    """Largest residual between the recursive and the direct bound.

    ``history`` is a sequence of ``(rho_l, phi_l)`` pairs.  The recursion

        D <- D - rho * (D phi)(D phi)' / (1 + rho * phi' D phi)

    is seeded either from ``init_info`` (the recursion then starts at its
    inverse) or from the first prefix whose information is invertible, and
    is compared elementwise against the directly inverted information after
    every subsequent step.
    """
    items = [(float(r), as_vector(p)) for r, p in history]
    if not items:
        raise DomainError("history must contain at least one (rho, phi) pair")
    n = items[0][1].size

    if init_info is not None:
        info = np.array(init_info, dtype=np.float64)
        delta = sym_invert(info)
    else:
        info = np.zeros((n, n))
        delta = None

    max_resid = 0.0
    seen = 0
    for r, phi in items:
        phi = as_vector(phi, n)
        info = info + r * np.outer(phi, phi)
        seen += 1
        if delta is None:
            if seen < n:
                continue
            try:
                cand = sym_invert(info)
            except PositiveDefiniteError:
                continue
            # a numerically singular prefix can slip through the pivot test;
            # only seed the recursion from a verified inverse
            if np.max(np.abs(info @ cand - np.eye(n))) <= 1e-8:
                delta = cand
            continue
        w = delta @ phi
        delta = delta - (r / (1.0 + r * float(phi @ w))) * np.outer(w, w)
        resid = float(np.max(np.abs(delta - sym_invert(info))))
        max_resid = max(max_resid, resid)
    if delta is None:
        raise PositiveDefiniteError("information never became invertible over the history")
    return max_resid
