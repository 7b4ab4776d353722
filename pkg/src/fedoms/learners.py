"""Complete learners: step-size schedules, the cooperative and noncooperative
drivers, and regret accounting.

The cooperative learner (:func:`run_fomd_oms`) runs the epoch protocol from
:mod:`fedoms.protocol`; the noncooperative baseline (:func:`run_nco_oms`)
runs one independent copy of the selection/update loop per client, with
single-client schedules and zero communication.  Both consume the same
pre-laid per-client uniform tables and share every numeric kernel, so at
M=1 the two produce bit-identical traces.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .data import Streams
from .mirror import (
    InfBox,
    L2Ball,
    entropy_step_log_batch,
    materialize,
    project,
    project_rows_per_row,
    step_rows,
)
from .protocol import (
    AuditLog,
    ClientBatch,
    EpochSchedule,
    RunSetup,
    ServerState,
    TraceBuffers,
    _check_bounds,
    _check_bounds_flat,
    _constraint_encoding,
    _fused_columns,
    run_epoch,
)
from .results import RunArtifact
from .rng import sampling_uniforms
from .sampling import (
    _validate_subset_size,
    group_subsets,
    inclusion_probabilities,
    subsets_from_uniforms,
)
from .spaces import HypothesisSpace, IdentityMap, Loss, loss_derivative, loss_value

__all__ = [
    "ScheduleParams",
    "LearnerConfig",
    "eta_schedule",
    "lambda_schedule",
    "lambda_schedule_all",
    "initial_distribution",
    "run_fomd_oms",
    "run_nco_oms",
    "regret_accounting",
    "best_fixed_hypothesis",
]

logger = logging.getLogger("fedoms.learners")


# ---------------------------------------------------------------------------
# Step-size schedules


@dataclass(frozen=True)
class ScheduleParams:
    """Inputs of the step-size schedules.

    ``horizon`` is the number of update steps the server takes: the round
    horizon T for per-round communication, or the epoch count R for the
    batched protocol.  The noncooperative baseline uses ``clients=1``.
    """

    num_spaces: int
    subset_size: int
    clients: int
    horizon: int
    radii: tuple[float, ...]
    lipschitz: tuple[float, ...]
    loss_bounds: tuple[float, ...]

    def __post_init__(self) -> None:
        _validate_subset_size(self.subset_size, self.num_spaces)
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.num_spaces * self.horizon < 2:
            raise ValueError("num_spaces * horizon must be >= 2 for a positive mirror rate")
        for name in ("radii", "lipschitz", "loss_bounds"):
            vals = getattr(self, name)
            if len(vals) != self.num_spaces:
                raise ValueError(f"{name} has {len(vals)} entries, expected {self.num_spaces}")
            if not all(np.isfinite(v) and v > 0 for v in vals):
                raise ValueError(f"{name} entries must be positive and finite, got {vals}")

    @staticmethod
    def from_spaces(
        spaces: "tuple[HypothesisSpace, ...] | list[HypothesisSpace]",
        subset_size: int,
        clients: int,
        horizon: int,
    ) -> "ScheduleParams":
        return ScheduleParams(
            num_spaces=len(spaces),
            subset_size=subset_size,
            clients=clients,
            horizon=horizon,
            radii=tuple(float(s.radius) for s in spaces),
            lipschitz=tuple(float(s.lipschitz_bound) for s in spaces),
            loss_bounds=tuple(float(s.loss_bound) for s in spaces),
        )

    @property
    def exploration_ratio(self) -> float:
        """(K - J) / (J - 1): the variance overhead of sampling J of K spaces."""
        if self.num_spaces == 1:
            return 0.0
        return (self.num_spaces - self.subset_size) / (self.subset_size - 1.0)

    @property
    def variance_factor(self) -> float:
        """1 + exploration_ratio / clients, the schedule's horizon inflation."""
        return 1.0 + self.exploration_ratio / self.clients


def _check_round(params: ScheduleParams, t: int) -> None:
    if not 1 <= t <= params.horizon:
        raise ValueError(f"round {t} outside horizon [1, {params.horizon}]")


def eta_schedule(params: ScheduleParams, t: int = 1) -> float:
    """Mirror-step rate: sqrt(ln(K*H)) / (2 sqrt(variance_factor * H)), capped.

    Constant in ``t`` for fixed parameters.  The cap (J-1)/(2(K-J)) keeps the
    implicit exponential weights stable when the sampled subset is much
    smaller than K; it disappears at J=K.
    """

    _check_round(params, t)
    K, J, H = params.num_spaces, params.subset_size, params.horizon
    rate = float(np.sqrt(np.log(K * H)) / (2.0 * np.sqrt(params.variance_factor * H)))
    if J < K:
        rate = min(rate, (J - 1.0) / (2.0 * (K - J)))
    return rate


def lambda_schedule(params: ScheduleParams, space_index: int, t: int) -> float:
    """Parameter step size of one space at round ``t``.

    Flat at its t = exploration_ratio^2 value until ``t`` exceeds that
    threshold, then decays as 1/sqrt(t); non-increasing throughout.
    """

    if not 0 <= space_index < params.num_spaces:
        raise ValueError(f"space index {space_index} outside [0, {params.num_spaces})")
    return float(lambda_schedule_all(params, t)[space_index])


def lambda_schedule_all(params: ScheduleParams, t: int) -> np.ndarray:
    """Vector of all K parameter step sizes at round ``t``."""
    _check_round(params, t)
    g = params.exploration_ratio
    denom = 2.0 * np.sqrt(params.variance_factor * max(g * g, float(t)))
    return np.asarray(params.radii) / (np.asarray(params.lipschitz) * denom)


def initial_distribution(params: ScheduleParams, uniform: bool = False) -> np.ndarray:
    """Initial sampling distribution: nearly all mass on the cheapest space.

    Every space gets 1/sqrt(K*H) and the spaces of minimal loss bound split
    the remaining 1 - sqrt(K/H) evenly — starting at the least costly space
    caps the worst-case early loss.  ``uniform=True`` selects the flat
    benchmark preset instead; when K >= H the formula would leave nothing to
    split, so the uniform fallback is used with a logged warning.
    """

    K, H = params.num_spaces, params.horizon
    if uniform:
        p = np.full(K, 1.0 / K)
    elif K >= H:
        logger.warning(
            "initial distribution: %d spaces >= horizon %d, falling back to uniform", K, H
        )
        p = np.full(K, 1.0 / K)
    else:
        bounds = np.asarray(params.loss_bounds)
        cheapest = bounds == bounds.min()
        p = np.full(K, 1.0 / np.sqrt(K * H))
        p += (1.0 - np.sqrt(K / H)) * cheapest / cheapest.sum()
    return p / p.sum()


# ---------------------------------------------------------------------------
# Learner configuration


@dataclass(frozen=True)
class LearnerConfig:
    """Everything needed to run either learner on a set of streams.

    ``epochs`` (cooperative learner only) batches the horizon into that many
    communication rounds; ``None`` communicates every round.  ``audit``
    additionally pushes every message through the serialized wire path and
    cross-checks it against the vectorized engine.
    """

    spaces: tuple[HypothesisSpace, ...]
    loss: Loss
    clients: int
    subset_size: int
    horizon: int
    epochs: int | None = None
    master_seed: int = 0
    uniform_init: bool = False
    audit: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.spaces, tuple):
            object.__setattr__(self, "spaces", tuple(self.spaces))
        if not self.spaces:
            raise ValueError("at least one hypothesis space is required")
        _validate_subset_size(self.subset_size, len(self.spaces))
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.epochs is not None:
            EpochSchedule(self.horizon, self.epochs)  # validates divisibility

    @property
    def num_spaces(self) -> int:
        return len(self.spaces)

    @property
    def effective_epochs(self) -> int:
        return self.horizon if self.epochs is None else self.epochs


def _validate_pair(config: LearnerConfig, streams: Streams) -> None:
    if streams.clients != config.clients:
        raise ValueError(
            f"config expects {config.clients} clients, streams provide {streams.clients}"
        )
    if streams.horizon != config.horizon:
        raise ValueError(
            f"config expects horizon {config.horizon}, streams provide {streams.horizon}"
        )
    for i, space in enumerate(config.spaces):
        expected = getattr(space.feature_map, "input_dim", None)
        if expected is not None and expected != streams.input_dim:
            raise ValueError(
                f"space {i} expects input dimension {expected}, "
                f"streams provide {streams.input_dim}"
            )


def _assemble(
    algorithm: str,
    config: LearnerConfig,
    streams: Streams,
    schedule: EpochSchedule,
    buffers: TraceBuffers,
    final_probs: np.ndarray,
    uplink_bits: int,
    downlink_bits: int,
    wall: float,
    audit: AuditLog | None,
) -> RunArtifact:
    M, T = config.clients, config.horizon
    N = schedule.rounds_per_epoch
    meta = dict(streams.meta)
    meta.update(seed=config.master_seed, subset_size=config.subset_size)
    if audit is not None:
        meta["audit_frames_checked"] = audit.frames_checked
        meta["audit_mismatches"] = list(audit.mismatches)
    return RunArtifact(
        algorithm=algorithm,
        clients=M,
        horizon=T,
        epochs=schedule.epochs,
        num_spaces=config.num_spaces,
        round_ids=np.repeat(np.arange(1, T + 1, dtype=np.int64), M),
        client_ids=np.tile(np.arange(M, dtype=np.int64), T),
        epoch_ids=np.repeat(np.arange(T, dtype=np.int64) // N + 1, M),
        lead_indices=buffers.leads.ravel(),
        predictions=buffers.predictions.ravel(),
        losses=buffers.losses.ravel(),
        targets=np.ascontiguousarray(streams.ys, dtype=float).T.ravel(),
        uplink_bits=buffers.uplink_bits.ravel(),
        downlink_bits=buffers.downlink_bits.ravel(),
        final_probs=final_probs,
        total_uplink_bits=int(uplink_bits),
        total_downlink_bits=int(downlink_bits),
        wall_seconds=wall,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Drivers


def run_fomd_oms(config: LearnerConfig, streams: Streams) -> RunArtifact:
    """Run the cooperative learner over its communication epochs.

    One server state is shared by all clients: each epoch the server samples
    a subset of spaces per client, clients report epoch-averaged losses and
    gradients for their subsets, and the server takes importance-weighted
    mirror/projected-gradient steps.  Schedules are evaluated with the epoch
    count as the effective horizon.
    """

    _validate_pair(config, streams)
    M, T = config.clients, config.horizon
    schedule = EpochSchedule(T, config.effective_epochs)
    params = ScheduleParams.from_spaces(
        config.spaces, config.subset_size, M, schedule.epochs
    )
    dims = np.array([s.dim for s in config.spaces], dtype=np.int64)
    if (dims == dims[0]).all():
        # uniform widths: a (K, dim) matrix lets epochs slice rows directly
        initial_weights = np.zeros((config.num_spaces, int(dims[0])))
    else:
        initial_weights = [np.zeros(s.dim) for s in config.spaces]
    state = ServerState(
        log_p=np.log(initial_distribution(params, uniform=config.uniform_init)),
        weights=initial_weights,
    )
    batch = ClientBatch(
        xs=np.ascontiguousarray(streams.xs, dtype=float),
        ys=np.ascontiguousarray(streams.ys, dtype=float),
        uniforms=sampling_uniforms(config.master_seed, M, T, config.subset_size),
    )
    buffers = TraceBuffers.allocate(T, M)
    audit = AuditLog() if config.audit else None
    setup = RunSetup(
        spaces=config.spaces,
        loss=config.loss,
        subset_size=config.subset_size,
        epochs=schedule,
        mirror_rate=eta_schedule(params),
        param_rates=lambda epoch: lambda_schedule_all(params, epoch),
        audit=audit,
    )
    start = time.perf_counter()
    for epoch in range(1, schedule.epochs + 1):
        run_epoch(state, setup, batch, epoch, buffers)
    wall = time.perf_counter() - start
    return _assemble(
        "fomd_oms", config, streams, schedule, buffers, materialize(state.log_p),
        state.uplink_bits, state.downlink_bits, wall, audit,
    )


def run_nco_oms(config: LearnerConfig, streams: Streams) -> RunArtifact:
    """Run the noncooperative baseline: per-client independent learners.

    Every client keeps its own sampling distribution and parameter vectors
    and updates them with single-client schedules; nothing is communicated,
    so both bit counters stay zero.  Clients are advanced in lock-step so the
    whole population is vectorized, but no value ever crosses clients.
    ``epochs`` must be unset: with no communication there is nothing to
    batch.  ``audit`` is ignored for the same reason.
    """

    _validate_pair(config, streams)
    if config.epochs not in (None, config.horizon):
        raise ValueError(
            "the noncooperative learner has no communication epochs; leave epochs unset"
        )
    M, T, K = config.clients, config.horizon, config.num_spaces
    params = ScheduleParams.from_spaces(config.spaces, config.subset_size, 1, T)
    eta = eta_schedule(params)
    scales = np.array([s.loss_bound for s in config.spaces], dtype=float)
    log_p = np.tile(
        np.log(initial_distribution(params, uniform=config.uniform_init)), (M, 1)
    )
    uniforms = sampling_uniforms(config.master_seed, M, T, config.subset_size)
    xs = np.ascontiguousarray(streams.xs, dtype=float)
    ys = np.ascontiguousarray(streams.ys, dtype=float)
    buffers = TraceBuffers.allocate(T, M)

    dims = np.array([s.dim for s in config.spaces], dtype=np.int64)
    if (dims == dims[0]).all():
        start = time.perf_counter()
        log_p = _nco_rounds_flat(config, params, eta, scales, log_p, uniforms,
                                 xs, ys, buffers)
        wall = time.perf_counter() - start
        return _assemble(
            "nco_oms", config, streams, EpochSchedule(T, T), buffers,
            materialize(log_p), 0, 0, wall, None,
        )

    weights = [np.zeros((M, s.dim)) for s in config.spaces]
    all_spaces = list(range(K))
    all_rows = np.arange(M)
    full_subset = config.subset_size == K
    start = time.perf_counter()
    for t0 in range(T):
        probs = materialize(log_p)
        indices = subsets_from_uniforms(probs, config.subset_size, uniforms[:, t0, :])
        inclusion = inclusion_probabilities(probs, config.subset_size)
        leads = indices[:, 0]
        rates = lambda_schedule_all(params, t0 + 1)
        xt = xs[:, t0, :]
        yt = ys[:, t0]
        estimates = np.zeros((M, K))
        touched = all_spaces if full_subset else [int(i) for i in np.unique(indices)]
        for i in touched:
            rows = all_rows if full_subset else (indices == i).any(axis=1).nonzero()[0]
            space = config.spaces[i]
            phi = space.feature_map(xt[rows])
            values = (phi * weights[i][rows]).sum(axis=1)
            closs = loss_value(config.loss, values, yt[rows])
            dvals = loss_derivative(config.loss, values, yt[rows])
            _check_bounds(closs, dvals, phi, space, i, t0 + 1)
            inc = inclusion[rows, i]
            estimates[rows, i] = closs / inc
            weights[i][rows] = step_rows(
                space.constraint,
                weights[i][rows],
                (dvals[:, None] * phi) / inc[:, None],
                float(rates[i]),
            )
            slots = (leads[rows] == i).nonzero()[0]
            if slots.size:
                lead_rows = rows[slots]
                buffers.predictions[t0, lead_rows] = values[slots]
                buffers.losses[t0, lead_rows] = closs[slots]
        buffers.leads[t0] = leads
        log_p = entropy_step_log_batch(log_p, estimates, scales, eta)
    wall = time.perf_counter() - start
    return _assemble(
        "nco_oms", config, streams, EpochSchedule(T, T), buffers,
        materialize(log_p), 0, 0, wall, None,
    )


def _nco_rounds_flat(
    config: LearnerConfig,
    params: ScheduleParams,
    eta: float,
    scales: np.ndarray,
    log_p: np.ndarray,
    uniforms: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    buffers: TraceBuffers,
) -> np.ndarray:
    """Noncooperative rounds with per-(client, space) work in flat arrays.

    Requires every space to share one feature dimension.  Produces the same
    floats as the grouped loop bit for bit, for the reasons given on
    :func:`fedoms.protocol._epoch_flat`.  Returns the final per-client
    log-probability rows.
    """
    M, T, K = config.clients, config.horizon, config.num_spaces
    spaces = config.spaces
    dim = spaces[0].dim
    weight_cube = np.zeros((K, M, dim))
    box_mask, cons_bound = _constraint_encoding(spaces, np.arange(K))
    lipschitz = np.array([s.lipschitz_bound for s in spaces])
    tol = 1e-9
    loss_limits = scales * (1.0 + 1e-12) + tol
    g_limits = lipschitz * (1.0 + 1e-12) + tol
    g_limits_sq = g_limits * g_limits
    columns = _fused_columns(spaces)
    identity = all(isinstance(s.feature_map, IdentityMap) for s in spaces)

    for t0 in range(T):
        probs = materialize(log_p)
        indices = subsets_from_uniforms(probs, config.subset_size, uniforms[:, t0, :])
        inclusion = inclusion_probabilities(probs, config.subset_size)
        rates = lambda_schedule_all(params, t0 + 1)
        groups = group_subsets(indices)
        touched = groups.touched
        starts = groups.bounds[:-1]
        rows = groups.rows
        flat_spaces = groups.space_ids()

        # the fused gathers pick the same floats the per-space maps would
        if columns is not None:
            yt = ys[rows, t0]
            phi = xs[rows, t0, columns[flat_spaces]][:, None]
        elif identity:
            yt = ys[rows, t0]
            phi = xs[rows, t0, :]
        else:
            xt = xs[:, t0, :][rows]
            yt = ys[:, t0][rows]
            phi = np.empty((rows.size, dim))
            for k in range(touched.size):
                seg = slice(starts[k], groups.bounds[k + 1])
                phi[seg] = spaces[int(touched[k])].feature_map(xt[seg])
        w_rows = weight_cube[flat_spaces, rows]
        values = (phi * w_rows).sum(axis=1)
        closs = loss_value(config.loss, values, yt)
        dvals = loss_derivative(config.loss, values, yt)
        gsq = (dvals * dvals) * (phi * phi).sum(axis=1)
        _check_bounds_flat(closs, gsq, starts, touched, spaces,
                           loss_limits[touched], g_limits_sq[touched], t0 + 1)
        inc = inclusion[rows, flat_spaces]
        estimates = np.zeros((M, K))
        estimates[rows, flat_spaces] = closs / inc
        grad_rows = (dvals[:, None] * phi) / inc[:, None]
        weight_cube[flat_spaces, rows] = project_rows_per_row(
            w_rows - rates[flat_spaces][:, None] * grad_rows,
            box_mask[flat_spaces],
            cons_bound[flat_spaces],
        )
        lead_mask = groups.slots == 0
        lead_rows = rows[lead_mask]
        buffers.predictions[t0, lead_rows] = values[lead_mask]
        buffers.losses[t0, lead_rows] = closs[lead_mask]
        buffers.leads[t0] = indices[:, 0]
        log_p = entropy_step_log_batch(log_p, estimates, scales, eta)
    return log_p


# ---------------------------------------------------------------------------
# Regret accounting


def _check_feasible(constraint: L2Ball | InfBox, w: np.ndarray, tol: float = 1e-9) -> None:
    if isinstance(constraint, L2Ball):
        norm = float(np.linalg.norm(w))
        if norm > constraint.radius + tol:
            raise ValueError(
                f"comparator is infeasible: norm {norm:.6g} exceeds radius "
                f"{constraint.radius:.6g}"
            )
    elif isinstance(constraint, InfBox):
        worst = float(np.abs(w).max())
        if worst > constraint.half_width + tol:
            raise ValueError(
                f"comparator is infeasible: coordinate magnitude {worst:.6g} exceeds "
                f"half width {constraint.half_width:.6g}"
            )
    else:
        raise TypeError(f"unsupported constraint {constraint!r}")


def regret_accounting(
    artifact: RunArtifact,
    streams: Streams,
    space: HypothesisSpace,
    loss_kind: Loss,
    comparator: np.ndarray,
) -> float:
    """Cumulative lead-model loss minus the comparator's loss on the same data.

    The comparator is a fixed parameter vector in ``space``; it must be
    feasible for the space's constraint set.  Summation runs over all
    clients and rounds.
    """

    w = np.asarray(comparator, dtype=float)
    if w.shape != (space.dim,):
        raise ValueError(f"comparator has shape {w.shape}, expected ({space.dim},)")
    _check_feasible(space.constraint, w)
    phi = space.feature_map(streams.xs.reshape(-1, streams.input_dim))
    comparator_loss = float(
        loss_value(loss_kind, phi @ w, streams.ys.reshape(-1)).sum()
    )
    return artifact.cumulative_loss() - comparator_loss


def best_fixed_hypothesis(
    streams: Streams,
    space: HypothesisSpace,
    loss_kind: Loss,
    steps: int = 10_000,
) -> np.ndarray:
    """Approximate the best fixed parameter vector in a space, offline.

    Full-batch projected gradient descent with step sizes radius/(G sqrt(s))
    over ``steps`` iterations, returning the iterate with the lowest
    objective seen.  For the square loss the objective and gradient are
    evaluated through precomputed second moments, so the per-step cost is
    independent of the dataset size.
    """

    phi = space.feature_map(streams.xs.reshape(-1, streams.input_dim))
    y = streams.ys.reshape(-1)
    n = y.shape[0]
    if loss_kind == Loss.SQUARE:
        gram = phi.T @ phi / n
        moment = phi.T @ y / n
        const = float(y @ y) / n

        def objective(v: np.ndarray) -> float:
            return float(v @ (gram @ v) - 2.0 * (moment @ v) + const)

        def gradient(v: np.ndarray) -> np.ndarray:
            return 2.0 * (gram @ v - moment)

    else:

        def objective(v: np.ndarray) -> float:
            return float(loss_value(loss_kind, phi @ v, y).mean())

        def gradient(v: np.ndarray) -> np.ndarray:
            return phi.T @ loss_derivative(loss_kind, phi @ v, y) / n

    w = np.zeros(space.dim)
    best_w, best_f = w.copy(), objective(w)
    for s in range(1, steps + 1):
        rate = space.radius / (space.lipschitz_bound * np.sqrt(s))
        w = project(space.constraint, w - rate * gradient(w))
        f = objective(w)
        if f < best_f:
            best_f, best_w = f, w.copy()
    return best_w
