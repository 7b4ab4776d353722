"""Subset sampling of hypothesis spaces and importance-weighted estimation.

Each round a client evaluates only a small ordered subset ``(A_1, ..., A_J)``
of the K spaces: the lead index ``A_1`` is drawn from the current probability
vector p, and ``A_2, ..., A_J`` are drawn uniformly without replacement from
the remaining K-1 indices.  Under that two-stage law the inclusion
probability of space i has the closed form

    P[i in O] = ((K - J) / (K - 1)) * p_i + (J - 1) / (K - 1),

which is what the importance-weighted loss and gradient estimators divide by.
All sampling consumes exactly J uniform draws per outcome, so draws can be
laid out in a (round, slot) table ahead of time and replayed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mirror import check_simplex


@dataclass(frozen=True)
class SamplingOutcome:
    """Ordered sampled subset plus the inclusion probabilities it was drawn under."""
    ordered_indices: np.ndarray  # (J,) distinct ints, lead first
    inclusion_probs: np.ndarray  # (K,) in (0, 1]

    @property
    def lead_index(self) -> int:
        return int(self.ordered_indices[0])

    @property
    def subset_size(self) -> int:
        return int(self.ordered_indices.size)


def _validate_subset_size(subset_size: int, num_spaces: int) -> None:
    if num_spaces == 1:
        if subset_size != 1:
            raise ValueError(f"subset_size must be 1 when K=1, got {subset_size}")
        return
    if not 2 <= subset_size <= num_spaces:
        raise ValueError(
            f"subset_size must satisfy 2 <= J <= K (got J={subset_size}, K={num_spaces}); "
            "J=1 is rejected because the estimator weights divide by J-1"
        )


def inclusion_probabilities(p: np.ndarray, subset_size: int) -> np.ndarray:
    """Closed-form P[i in O] under the two-stage sampling law; broadcasts over rows."""
    p = np.asarray(p, dtype=float)
    num_spaces = p.shape[-1]
    if num_spaces == 1:
        return np.ones_like(p)
    j = float(subset_size)
    return ((num_spaces - j) / (num_spaces - 1.0)) * p + (j - 1.0) / (num_spaces - 1.0)


def subsets_from_uniforms(probs: np.ndarray, subset_size: int, uniforms: np.ndarray) -> np.ndarray:
    """Map uniform draws to ordered sampled subsets; vectorized over rows.

    Parameters
    ----------
    probs : (K,) shared probability vector or (n, K) one per row.
    subset_size : J.
    uniforms : (n, J) draws in [0, 1); column 0 picks the lead by inverse CDF,
        columns 1..J-1 drive a partial Fisher-Yates pass over the complement.

    Returns
    -------
    (n, J) integer indices, distinct within each row, lead first.
    """
    uniforms = np.asarray(uniforms, dtype=float)
    n, j = uniforms.shape
    if j != subset_size:
        raise ValueError(f"uniforms have {j} slots per row, expected {subset_size}")
    probs = np.asarray(probs, dtype=float)
    shared = probs.ndim == 1
    num_spaces = probs.shape[-1]
    _validate_subset_size(subset_size, num_spaces)

    out = np.empty((n, subset_size), dtype=np.int64)
    cum = np.cumsum(probs, axis=-1)
    # inverse CDF; ties resolved as "insert right" in both layouts
    if shared:
        targets = uniforms[:, 0] * cum[-1]
        lead = np.searchsorted(cum, targets, side="right")
    else:
        targets = uniforms[:, 0] * cum[:, -1]
        lead = (cum <= targets[:, None]).sum(axis=1)
    lead = np.minimum(lead, num_spaces - 1)
    out[:, 0] = lead
    if subset_size == 1:
        return out

    # complement of the lead, in index order; partial Fisher-Yates over it
    if subset_size == 2:
        # single Fisher-Yates step; the pool entry at `pos` is pos itself
        # shifted past the lead, so skip materializing the pool
        pos = np.minimum((uniforms[:, 1] * (num_spaces - 1)).astype(np.int64),
                         num_spaces - 2)
        out[:, 1] = pos + (pos >= lead)
        return out
    # int32 pool: indices are small, and the pool dominates memory traffic
    base = np.arange(num_spaces - 1, dtype=np.int32)
    rest = base[None, :] + (base[None, :] >= lead[:, None])
    rows = np.arange(n)
    # pool sizes per slot: K-1, K-2, ...; truncation per column is unchanged
    sizes = np.arange(num_spaces - 1, num_spaces - subset_size, -1, dtype=float)
    pos_all = (uniforms[:, 1:] * sizes[None, :]).astype(np.int64)
    np.minimum(pos_all, np.int64(num_spaces - 2) - np.arange(subset_size - 1),
               out=pos_all)
    remaining = num_spaces - 1
    for a in range(1, subset_size):
        pos = pos_all[:, a - 1]
        out[:, a] = rest[rows, pos]
        rest[rows, pos] = rest[:, remaining - 1]
        remaining -= 1
    return out


def sample_subset(p: np.ndarray, subset_size: int, rng: np.random.Generator) -> SamplingOutcome:
    """Draw one ordered subset of spaces: lead from p, the rest uniformly.

    Consumes exactly ``subset_size`` uniforms from ``rng``.
    """
    p = check_simplex(p)
    _validate_subset_size(subset_size, p.size)
    u = rng.random((1, subset_size))
    idx = subsets_from_uniforms(p, subset_size, u)[0]
    return SamplingOutcome(ordered_indices=idx, inclusion_probs=inclusion_probabilities(p, subset_size))


def estimate_losses(raw_losses: np.ndarray, outcome: SamplingOutcome) -> np.ndarray:
    """Importance-weighted loss estimates over all K spaces.

    ``raw_losses`` holds the realized losses of the sampled spaces, aligned
    with ``outcome.ordered_indices``; unsampled coordinates estimate to zero.
    The estimator is unbiased: E[out_i] equals the true loss of space i.
    """
    raw = np.asarray(raw_losses, dtype=float)
    idx = outcome.ordered_indices
    if raw.shape != idx.shape:
        raise ValueError(f"raw_losses shape {raw.shape} does not match subset shape {idx.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw_losses has non-finite entries")
    out = np.zeros(outcome.inclusion_probs.size)
    out[idx] = raw / outcome.inclusion_probs[idx]
    return out


def estimate_gradients(raw_gradients: list[np.ndarray], outcome: SamplingOutcome,
                       dims: list[int]) -> list[np.ndarray]:
    """Importance-weighted gradient estimates: one vector per space, zeros off-subset."""
    idx = outcome.ordered_indices
    if len(raw_gradients) != idx.size:
        raise ValueError(f"got {len(raw_gradients)} gradients for a subset of size {idx.size}")
    out = [np.zeros(d) for d in dims]
    for a, i in enumerate(idx):
        g = np.asarray(raw_gradients[a], dtype=float)
        if g.shape != (dims[i],):
            raise ValueError(f"gradient {a} has shape {g.shape}, expected ({dims[i]},)")
        out[i] = g / outcome.inclusion_probs[i]
    return out


@dataclass(frozen=True)
class SubsetGroups:
    """A (clients, J) subset table sorted into contiguous per-space segments.

    ``touched`` lists the sampled space ids in ascending order; the entries
    of segment ``k`` (flat positions ``bounds[k]:bounds[k + 1]``) all sampled
    space ``touched[k]``.  ``rows[f]`` / ``slots[f]`` give the client and the
    within-subset position of flat entry ``f``; within a segment the rows are
    strictly ascending, since no client samples a space twice.  ``segment_of``
    maps each flat entry back to its segment index, so ``touched[segment_of]``
    is the space id per entry.
    """

    touched: np.ndarray     # (S,) ascending space ids
    bounds: np.ndarray      # (S + 1,) segment offsets into the flat order
    segment_of: np.ndarray  # (clients * J,)
    rows: np.ndarray        # (clients * J,) client per flat entry
    slots: np.ndarray       # (clients * J,) subset position per flat entry

    @property
    def size(self) -> int:
        return int(self.touched.size)

    def space_ids(self) -> np.ndarray:
        """Space id per flat entry (``touched`` gathered by segment)."""
        return self.touched[self.segment_of]


def group_subsets(indices: np.ndarray) -> SubsetGroups:
    """Group a (clients, J) table of sampled subsets by space.

    One stable sort of the flattened table (so rows stay ascending within a
    space) replaces a per-space membership scan; all downstream per-space
    work can then run on contiguous slices.
    """
    if indices.ndim != 2:
        raise ValueError(f"indices must be 2-d, got shape {indices.shape}")
    subset_size = indices.shape[1]
    flat = indices.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    first = np.empty(sorted_flat.size, dtype=bool)
    first[0] = True
    np.not_equal(sorted_flat[1:], sorted_flat[:-1], out=first[1:])
    starts = np.flatnonzero(first)
    segment_of = np.cumsum(first)
    segment_of -= 1
    rows, slots = np.divmod(order, subset_size)
    return SubsetGroups(
        touched=sorted_flat[starts],
        bounds=np.concatenate((starts, [sorted_flat.size])),
        segment_of=segment_of,
        rows=rows,
        slots=slots,
    )
