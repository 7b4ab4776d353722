"""Online mirror descent primitives.

Two geometries are implemented:

* a weighted negative-entropy regularizer over the probability simplex,
  ``psi(p) = sum_i (scale_i / eta) * p_i * log(p_i)``, whose mirror step is a
  per-coordinate exponential reweighting followed by an exact renormalization
  via a scalar multiplier found by a monotone Newton solve;
* the Euclidean regularizer over a convex constraint set (an L2 ball or a
  coordinate-wise box), whose mirror step is projected gradient descent.

All functions are pure: they never mutate their array arguments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIMPLEX_SUM_TOL = 1e-9
BISECT_SUM_TOL = 1e-12
# converge on |log S| instead of |S - 1|; |log S| <= 5e-13 forces
# |S - 1| <= exp(5e-13) - 1 < BISECT_SUM_TOL
LOG_SUM_TOL = 5e-13
BISECT_MAX_ITER = 200
PROB_FLOOR = 1e-300


class MirrorError(RuntimeError):
    """Raised when a mirror step cannot be completed (pathological inputs)."""


# --------------------------------------------------------------------------
# geometries and constraint sets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class L2Ball:
    """Euclidean ball { w : ||w||_2 <= radius }."""
    radius: float

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError(f"L2Ball radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class InfBox:
    """Coordinate-wise box { w : ||w||_inf <= half_width }."""
    half_width: float

    def __post_init__(self):
        if not (np.isfinite(self.half_width) and self.half_width > 0):
            raise ValueError(f"InfBox half_width must be positive, got {self.half_width}")


@dataclass(frozen=True)
class WeightedEntropyGeometry:
    """Simplex geometry with per-coordinate positive scales and a step size."""
    scales: np.ndarray
    learning_rate: float

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=float)
        object.__setattr__(self, "scales", scales)
        if scales.ndim != 1 or scales.size == 0:
            raise ValueError("scales must be a non-empty 1-d array")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("scales must be finite and strictly positive")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class EuclideanGeometry:
    """Euclidean geometry with a step size and a constraint set."""
    learning_rate: float
    constraint: L2Ball | InfBox

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


# --------------------------------------------------------------------------
# simplex helpers
# --------------------------------------------------------------------------

def check_simplex(p: np.ndarray, *, name: str = "p") -> np.ndarray:
    """Validate a probability vector: strictly positive, sums to 1 within tolerance."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(p <= 0):
        raise ValueError(f"{name} must be strictly positive")
    if abs(p.sum() - 1.0) > SIMPLEX_SUM_TOL:
        raise ValueError(f"{name} sums to {p.sum()!r}, expected 1 within {SIMPLEX_SUM_TOL}")
    return p


def materialize(log_p: np.ndarray) -> np.ndarray:
    """Linear-space probabilities from log-space state (floored + renormalized)."""
    p = np.exp(log_p)
    p = np.maximum(p, PROB_FLOOR)
    if log_p.ndim == 1:
        return p / p.sum()
    return p / p.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# weighted-entropy mirror step
# --------------------------------------------------------------------------

def _solve_multiplier_batch(
    log_p: np.ndarray,
    losses: np.ndarray,
    rates: np.ndarray,
) -> np.ndarray:
    """Newton solve for the normalizing multipliers of a batch of entropy steps.

    Parameters
    ----------
    log_p : (B, K) log-probabilities; every row sums to 1 in linear space.
    losses : (B, K) non-negative loss vectors.
    rates : (K,) the per-coordinate ratio learning_rate / scale_i.

    Returns
    -------
    (B,) multipliers lam with lam in [-max_i loss_i, 0] such that
    S(lam) = sum_i p_i * exp(-rates_i * (lam + loss_i)) = 1 within
    ``BISECT_SUM_TOL``.

    Notes
    -----
    S is convex and decreasing in lam, >= 1 at lam = -max_i loss_i and <= 1
    at lam = 0, so that bracket always contains the root.  Writing
    A = S(0) <= 1, the root also satisfies log(A)/r_min <= lam <= log(A)/r_max
    (bound each factor exp(-r_i lam) by the extreme rates).  The root solve
    runs Newton on log S rather than S: log S is a log-sum-exp of affine
    functions of lam, hence also convex and decreasing, so iterates started
    from the left end of the intersected bracket (where log S >= 0) increase
    monotonically to the root without overshooting; unlike Newton on S
    itself, the step log S / (-(log S)') crosses regions dominated by a
    single stiff exponential in one move instead of creeping by 1/r_max per
    iteration.  The bracket is kept as a safeguard: candidates are clamped
    into it, and a stagnating step falls back to the midpoint, so worst-case
    behaviour is that of plain bisection.  With equal rates the starting
    bracket already collapses onto the root and the loop exits after one
    residual check.
    """
    shifted = log_p - rates[None, :] * losses  # log(p_i) - r_i c_i
    max_c = losses.max(axis=1)
    m = shifted.max(axis=1)
    log_a = m + np.log(np.exp(shifted - m[:, None]).sum(axis=1))  # log S(0) <= ~0
    r_min = float(rates.min())
    r_max = float(rates.max())
    lo = np.maximum(-max_c, log_a / r_min)
    hi = np.minimum(0.0, log_a / r_max)
    # all-zero loss rows have lam = 0; rounding can also invert the bracket
    # by ~1 ulp, which the clamp below repairs
    zero_rows = max_c <= 0.0
    lo = np.where(zero_rows, 0.0, np.minimum(lo, hi))
    hi = np.where(zero_rows, 0.0, hi)
    lam = lo.copy()
    rates_row = rates[None, :]
    work = np.empty_like(shifted)
    log_s = np.zeros_like(lam)
    for _ in range(BISECT_MAX_ITER):
        np.multiply(lam[:, None], rates_row, out=work)
        np.subtract(shifted, work, out=work)
        peak = work.max(axis=1)
        np.subtract(work, peak[:, None], out=work)
        np.exp(work, out=work)  # max-shifted, cannot overflow
        total = work.sum(axis=1)
        log_s = peak + np.log(total)
        done = np.abs(log_s) <= LOG_SUM_TOL
        if done.all():
            return lam
        above = log_s > 0.0
        lo = np.where(above, lam, lo)
        hi = np.where(above, hi, lam)
        mean_rate = (work * rates_row).sum(axis=1) / total  # -(log S)' > 0
        candidate = np.clip(lam + log_s / mean_rate, lo, hi)
        stalled = candidate == lam
        lam = np.where(done, lam,
                       np.where(stalled, 0.5 * (lo + hi), candidate))
    raise MirrorError(
        "entropy step normalizer did not converge within "
        f"{BISECT_MAX_ITER} Newton iterations (|log sum| still "
        f"{float(np.abs(log_s).max()):.3e}); inputs are likely pathological"
    )


def entropy_step_log_batch(
    log_p: np.ndarray,
    losses: np.ndarray,
    scales: np.ndarray,
    learning_rate: float,
) -> np.ndarray:
    """Weighted-entropy mirror step on a batch of log-space simplex states.

    Returns new log-probabilities; each output row is renormalized in log
    space so that its linear-space sum is 1 to machine precision, which keeps
    the solver's starting bracket valid over arbitrarily long update sequences.
    """
    losses = np.asarray(losses, dtype=float)
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and non-negative")
    rates = learning_rate / np.asarray(scales, dtype=float)
    lam = _solve_multiplier_batch(log_p, losses, rates)
    out = log_p - rates[None, :] * (lam[:, None] + losses)
    # exact renormalization (cheap logsumexp; keeps sum(exp(out)) == 1)
    m = out.max(axis=1, keepdims=True)
    out = out - (m + np.log(np.exp(out - m).sum(axis=1, keepdims=True)))
    return out


def solve_entropy_multiplier(
    geometry: WeightedEntropyGeometry, p: np.ndarray, losses: np.ndarray
) -> float:
    """Normalizing multiplier of one entropy mirror step (in [-max losses, 0])."""
    p = check_simplex(p)
    losses = np.asarray(losses, dtype=float)
    if losses.shape != p.shape:
        raise ValueError(f"losses shape {losses.shape} does not match p shape {p.shape}")
    if geometry.scales.shape != p.shape:
        raise ValueError("geometry scales do not match p")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and non-negative")
    p = p / p.sum()
    rates = geometry.learning_rate / geometry.scales
    lam = _solve_multiplier_batch(np.log(p)[None, :], losses[None, :], rates)
    return float(lam[0])


def entropy_mirror_step(
    geometry: WeightedEntropyGeometry, p: np.ndarray, losses: np.ndarray
) -> np.ndarray:
    """One weighted-entropy mirror-descent update of a probability vector.

    New probabilities are ``p_i * exp(-eta * (lam + loss_i) / scale_i)`` with
    the multiplier lam chosen so the result lies on the simplex.  With equal
    scales this coincides with exponentiated gradient plus normalization.
    """
    p = check_simplex(p)
    losses = np.asarray(losses, dtype=float)
    if losses.shape != p.shape:
        raise ValueError(f"losses shape {losses.shape} does not match p shape {p.shape}")
    if geometry.scales.shape != p.shape:
        raise ValueError("geometry scales do not match p")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and non-negative")
    p = p / p.sum()  # pin the sum to 1 exactly so the bracket is valid
    if not losses.any():  # identity short-circuit
        return p
    log_new = entropy_step_log_batch(
        np.log(p)[None, :], losses[None, :], geometry.scales, geometry.learning_rate
    )
    return materialize(log_new[0])


def bregman_divergence_entropy(
    geometry: WeightedEntropyGeometry, p: np.ndarray, q: np.ndarray
) -> float:
    """Bregman divergence of the weighted-entropy regularizer.

    D(p, q) = (1/eta) * sum_i scale_i * (p_i log(p_i/q_i) + q_i - p_i).
    Both arguments must be strictly positive simplex points.
    """
    p = check_simplex(p, name="p")
    q = check_simplex(q, name="q")
    if p.shape != q.shape or p.shape != geometry.scales.shape:
        raise ValueError("p, q and geometry scales must share one shape")
    terms = geometry.scales * (p * np.log(p / q) + q - p)
    return float(terms.sum() / geometry.learning_rate)


# --------------------------------------------------------------------------
# Euclidean mirror step (projected gradient descent)
# --------------------------------------------------------------------------

def project_rows(constraint: L2Ball | InfBox, w: np.ndarray) -> np.ndarray:
    """Euclidean projection of a (B, d) stack of vectors onto the constraint set."""
    if isinstance(constraint, L2Ball):
        norms = np.sqrt((w * w).sum(axis=1))
        scale = np.minimum(1.0, constraint.radius / np.maximum(norms, 1e-300))
        return w * scale[:, None]
    if isinstance(constraint, InfBox):
        return np.clip(w, -constraint.half_width, constraint.half_width)
    raise TypeError(f"unsupported constraint {constraint!r}")


def step_rows(constraint: L2Ball | InfBox, w: np.ndarray, gradients: np.ndarray,
              learning_rate: float) -> np.ndarray:
    """Projected gradient step on a (B, d) stack of vectors."""
    return project_rows(constraint, w - learning_rate * gradients)


def project_rows_per_row(w: np.ndarray, box_mask: np.ndarray,
                         bound: np.ndarray) -> np.ndarray:
    """Euclidean projection of a (B, d) stack where each row has its own set.

    Row ``k`` projects onto the L2 ball of radius ``bound[k]`` when
    ``box_mask[k]`` is false, else onto the inf-box of half width
    ``bound[k]``.  Row for row this equals :func:`project_rows` with the
    corresponding constraint, including the exact no-op on interior points.
    """
    if not box_mask.any():
        norms = np.sqrt((w * w).sum(axis=1))
        scale = np.minimum(1.0, bound / np.maximum(norms, 1e-300))
        return w * scale[:, None]
    if box_mask.all():
        return np.clip(w, -bound[:, None], bound[:, None])
    out = np.empty_like(w)
    ball = ~box_mask
    wb = w[ball]
    norms = np.sqrt((wb * wb).sum(axis=1))
    out[ball] = wb * np.minimum(1.0, bound[ball] / np.maximum(norms, 1e-300))[:, None]
    half = bound[box_mask][:, None]
    out[box_mask] = np.clip(w[box_mask], -half, half)
    return out


def project(constraint: L2Ball | InfBox, w: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the constraint set."""
    w = np.asarray(w, dtype=float)
    return project_rows(constraint, w[None, :])[0]


def euclidean_step(geometry: EuclideanGeometry, w: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Projected gradient step: project(w - learning_rate * gradient)."""
    w = np.asarray(w, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if w.shape != gradient.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match w shape {w.shape}")
    if not np.all(np.isfinite(gradient)):
        raise ValueError("gradient has non-finite entries")
    return step_rows(geometry.constraint, w[None, :], gradient[None, :], geometry.learning_rate)[0]
