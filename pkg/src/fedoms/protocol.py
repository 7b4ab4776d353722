"""Communication layer for federated online model selection.

This module owns everything that crosses the client/server boundary:

* :class:`EpochSchedule` — partition of the round horizon into equal
  communication epochs.
* :class:`DownlinkMessage` / :class:`UplinkMessage` — the logical payloads
  exchanged once per epoch, plus :class:`Frame` with a byte-exact wire
  encoding (header + IEEE-754 single floats + bit-packed indices).
* :func:`account_bits` — closed-form information-bit cost of each message.
* :func:`aggregate_reports` — the server-side merge of client reports into
  importance-weighted loss/gradient estimates.
* :func:`run_epoch` — one full communication epoch of the cooperative
  protocol, vectorized across clients.

The engine keeps the server's sampling distribution in log space; see
:mod:`fedoms.mirror` for why.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .mirror import (
    InfBox,
    entropy_step_log_batch,
    materialize,
    project_rows_per_row,
    step_rows,
)
from .sampling import group_subsets, inclusion_probabilities, subsets_from_uniforms
from .spaces import (
    CoordinateMap,
    HypothesisSpace,
    IdentityMap,
    Loss,
    loss_derivative,
    loss_value,
)

__all__ = [
    "ProtocolError",
    "RunInvariantError",
    "EpochSchedule",
    "DownlinkMessage",
    "UplinkMessage",
    "Frame",
    "KIND_DOWNLINK",
    "KIND_UPLINK",
    "bits_per_index",
    "account_bits",
    "encode_downlink",
    "encode_uplink",
    "decode_frame",
    "aggregate_reports",
    "ServerState",
    "ClientBatch",
    "RunSetup",
    "TraceBuffers",
    "AuditLog",
    "run_epoch",
]


class ProtocolError(ValueError):
    """Raised for malformed schedules, messages, or frames."""


class RunInvariantError(RuntimeError):
    """Raised when an observed loss or gradient exceeds its declared bound.

    The declared per-space loss bound and Lipschitz bound feed the step-size
    schedules, so a violation silently invalidates every guarantee of the
    run; we abort instead of continuing with a broken configuration.
    """


# ---------------------------------------------------------------------------
# Epoch bookkeeping


@dataclass(frozen=True)
class EpochSchedule:
    """Partition of ``horizon`` rounds into ``epochs`` equal blocks.

    Decisions are frozen within a block and communication happens once per
    block: model broadcast at the first round, report upload at the last.
    ``horizon % epochs`` must be zero — ragged final epochs are rejected
    rather than silently truncated.
    """

    horizon: int
    epochs: int

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ProtocolError(f"horizon must be >= 1, got {self.horizon}")
        if self.epochs < 1:
            raise ProtocolError(f"epochs must be >= 1, got {self.epochs}")
        if self.horizon % self.epochs != 0:
            raise ProtocolError(
                f"epochs must divide the horizon exactly: "
                f"{self.horizon} % {self.epochs} != 0"
            )

    @property
    def rounds_per_epoch(self) -> int:
        return self.horizon // self.epochs

    def epoch_of(self, round_index: int) -> int:
        """1-based epoch containing 1-based round ``round_index``."""
        if not 1 <= round_index <= self.horizon:
            raise ProtocolError(f"round {round_index} outside horizon {self.horizon}")
        return (round_index - 1) // self.rounds_per_epoch + 1

    def first_round(self, epoch: int) -> int:
        """1-based first round of 1-based epoch ``epoch``."""
        if not 1 <= epoch <= self.epochs:
            raise ProtocolError(f"epoch {epoch} outside schedule of {self.epochs}")
        return (epoch - 1) * self.rounds_per_epoch + 1

    def last_round(self, epoch: int) -> int:
        return self.first_round(epoch) + self.rounds_per_epoch - 1


# ---------------------------------------------------------------------------
# Messages and wire format


@dataclass(frozen=True)
class DownlinkMessage:
    """Server -> client broadcast at the start of an epoch.

    Carries the sampled space indices (lead first) and the current parameter
    vector of each sampled space, in index order.
    """

    epoch: int
    client_id: int
    indices: tuple[int, ...]
    weights: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.indices) != len(self.weights):
            raise ProtocolError(
                f"{len(self.indices)} indices but {len(self.weights)} weight vectors"
            )


@dataclass(frozen=True)
class UplinkMessage:
    """Client -> server report at the end of an epoch.

    ``mean_losses[a]`` / ``mean_gradients[a]`` are the within-epoch averages
    of the raw losses and gradients of sampled space ``indices[a]``.  Raw
    means: importance weighting is the server's job, so a client never needs
    to know the sampling distribution.
    """

    epoch: int
    client_id: int
    indices: tuple[int, ...]
    mean_losses: np.ndarray
    mean_gradients: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.indices) != len(self.mean_gradients):
            raise ProtocolError(
                f"{len(self.indices)} indices but {len(self.mean_gradients)} gradients"
            )
        if np.asarray(self.mean_losses).shape != (len(self.indices),):
            raise ProtocolError(
                f"mean_losses shape {np.asarray(self.mean_losses).shape} != "
                f"({len(self.indices)},)"
            )


KIND_DOWNLINK = 0
KIND_UPLINK = 1

# epoch u32 | client u32 | payload bits u32 | kind u8 | index count u8 | pad u16
_HEADER = struct.Struct("<IIIBBH")
HEADER_BYTES = _HEADER.size  # 16


@dataclass(frozen=True)
class Frame:
    """One wire frame: fixed 16-byte header plus payload bytes.

    ``payload_bits`` is the number of information bits in the payload, which
    can be smaller than ``8 * len(payload)`` because the trailing bit-packed
    index block is zero-padded up to a byte boundary.
    """

    epoch: int
    client_id: int
    payload_bits: int
    kind: int
    index_count: int
    payload: bytes

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            self.epoch, self.client_id, self.payload_bits, self.kind, self.index_count, 0
        )
        return header + self.payload

    @staticmethod
    def from_bytes(blob: bytes) -> "Frame":
        if len(blob) < HEADER_BYTES:
            raise ProtocolError(f"frame shorter than header: {len(blob)} bytes")
        epoch, client_id, payload_bits, kind, count, _pad = _HEADER.unpack_from(blob)
        payload = blob[HEADER_BYTES:]
        if payload_bits > 8 * len(payload):
            raise ProtocolError(
                f"header claims {payload_bits} payload bits but only "
                f"{8 * len(payload)} are present"
            )
        return Frame(epoch, client_id, payload_bits, kind, count, payload)


def bits_per_index(num_spaces: int) -> int:
    """Bits needed to address one of ``num_spaces`` spaces: ceil(log2 K)."""
    if num_spaces < 1:
        raise ProtocolError(f"num_spaces must be >= 1, got {num_spaces}")
    return (num_spaces - 1).bit_length()


def account_bits(message: DownlinkMessage | UplinkMessage, num_spaces: int) -> int:
    """Information bits of a message under the standard encoding.

    Each parameter coordinate and each scalar loss costs 32 bits (IEEE-754
    single precision); each space index costs ceil(log2 K) bits.  Downlink
    carries weights + indices; uplink carries mean gradients (same coordinate
    count as the weights), mean losses (one float per index), and indices.
    """

    q = bits_per_index(num_spaces)
    if isinstance(message, DownlinkMessage):
        coords = sum(int(w.shape[0]) for w in message.weights)
        return 32 * coords + len(message.indices) * q
    if isinstance(message, UplinkMessage):
        coords = sum(int(g.shape[0]) for g in message.mean_gradients)
        return 32 * (coords + len(message.indices)) + len(message.indices) * q
    raise TypeError(f"unsupported message {message!r}")


def _pack_indices(indices: Sequence[int], num_spaces: int) -> tuple[bytes, int]:
    """Bit-pack indices most-significant-first, zero-padded to a whole byte."""
    q = bits_per_index(num_spaces)
    acc = 0
    for i in indices:
        if not 0 <= int(i) < num_spaces:
            raise ProtocolError(f"index {i} out of range [0, {num_spaces})")
        acc = (acc << q) | int(i)
    nbits = q * len(indices)
    pad = (-nbits) % 8
    acc <<= pad
    return acc.to_bytes((nbits + pad) // 8, "big"), nbits


def _unpack_indices(blob: bytes, count: int, num_spaces: int) -> tuple[int, ...]:
    q = bits_per_index(num_spaces)
    nbits = q * count
    if len(blob) != (nbits + 7) // 8:
        raise ProtocolError(
            f"index block is {len(blob)} bytes, expected {(nbits + 7) // 8}"
        )
    acc = int.from_bytes(blob, "big")
    pad = 8 * len(blob) - nbits
    if acc & ((1 << pad) - 1):
        raise ProtocolError("index block has non-zero padding bits")
    acc >>= pad
    out = []
    for _ in range(count):
        acc, low = divmod(acc, 1 << q) if q else (acc, 0)
        out.append(low)
    out.reverse()
    for i in out:
        if i >= num_spaces:
            raise ProtocolError(f"decoded index {i} out of range [0, {num_spaces})")
    return tuple(out)


def _float_block(vectors: Sequence[np.ndarray]) -> bytes:
    return b"".join(np.asarray(v, dtype="<f4").tobytes() for v in vectors)


def encode_downlink(message: DownlinkMessage, num_spaces: int) -> Frame:
    """Serialize a broadcast: f32 weights in index order, then packed indices."""
    floats = _float_block(message.weights)
    packed, _ = _pack_indices(message.indices, num_spaces)
    return Frame(
        epoch=message.epoch,
        client_id=message.client_id,
        payload_bits=account_bits(message, num_spaces),
        kind=KIND_DOWNLINK,
        index_count=len(message.indices),
        payload=floats + packed,
    )


def encode_uplink(message: UplinkMessage, num_spaces: int) -> Frame:
    """Serialize a report: f32 mean losses, f32 mean gradients, packed indices."""
    floats = _float_block([np.asarray(message.mean_losses)]) + _float_block(
        message.mean_gradients
    )
    packed, _ = _pack_indices(message.indices, num_spaces)
    return Frame(
        epoch=message.epoch,
        client_id=message.client_id,
        payload_bits=account_bits(message, num_spaces),
        kind=KIND_UPLINK,
        index_count=len(message.indices),
        payload=floats + packed,
    )


def decode_frame(
    frame: Frame, num_spaces: int, dims: Sequence[int]
) -> DownlinkMessage | UplinkMessage:
    """Parse a frame back into a message (floats come back as float64).

    ``dims`` gives the parameter dimension of every space, so the decoder can
    slice the float block once the trailing indices are known.
    """

    q = bits_per_index(num_spaces)
    nidx_bytes = (q * frame.index_count + 7) // 8
    if nidx_bytes > len(frame.payload):
        raise ProtocolError("payload too short for declared index count")
    split = len(frame.payload) - nidx_bytes
    indices = _unpack_indices(frame.payload[split:], frame.index_count, num_spaces)
    floats = np.frombuffer(frame.payload[:split], dtype="<f4").astype(float)
    want = sum(int(dims[i]) for i in indices)
    if frame.kind == KIND_DOWNLINK:
        if floats.shape[0] != want:
            raise ProtocolError(
                f"downlink float block has {floats.shape[0]} values, expected {want}"
            )
        weights, pos = [], 0
        for i in indices:
            weights.append(floats[pos : pos + dims[i]])
            pos += dims[i]
        return DownlinkMessage(frame.epoch, frame.client_id, indices, tuple(weights))
    if frame.kind == KIND_UPLINK:
        count = frame.index_count
        if floats.shape[0] != want + count:
            raise ProtocolError(
                f"uplink float block has {floats.shape[0]} values, expected {want + count}"
            )
        mean_losses = floats[:count]
        grads, pos = [], count
        for i in indices:
            grads.append(floats[pos : pos + dims[i]])
            pos += dims[i]
        return UplinkMessage(
            frame.epoch, frame.client_id, indices, mean_losses, tuple(grads)
        )
    raise ProtocolError(f"unknown frame kind {frame.kind}")


# ---------------------------------------------------------------------------
# Server-side aggregation


def aggregate_reports(
    reports: Sequence[UplinkMessage],
    inclusion_probs: np.ndarray,
    num_spaces: int,
    dims: Sequence[int],
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Merge one epoch of client reports into unbiased global estimates.

    Each reported mean loss/gradient is divided by the inclusion probability
    of its space (importance weighting for the sampled-subset censoring) and
    the weighted reports are averaged over all clients.  Spaces sampled by no
    client get estimate zero, which is exactly what the importance weighting
    prescribes.  Returns the (K,) loss estimate and a {space: (d_i,)} map of
    gradient estimates for the spaces that appear in at least one report.
    """

    if not reports:
        raise ProtocolError("no reports to aggregate")
    epoch = reports[0].epoch
    seen: set[int] = set()
    for msg in reports:
        if msg.epoch != epoch:
            raise ProtocolError(
                f"mixed epochs in aggregation: {msg.epoch} != {epoch}"
            )
        if msg.client_id in seen:
            raise ProtocolError(f"duplicate report from client {msg.client_id}")
        seen.add(msg.client_id)
    inclusion_probs = np.asarray(inclusion_probs, dtype=float)
    if inclusion_probs.shape != (num_spaces,):
        raise ProtocolError(
            f"inclusion_probs shape {inclusion_probs.shape} != ({num_spaces},)"
        )
    count = len(reports)
    loss_est = np.zeros(num_spaces)
    grad_est: dict[int, np.ndarray] = {}
    for msg in sorted(reports, key=lambda m: m.client_id):
        for slot, i in enumerate(msg.indices):
            if not 0 <= i < num_spaces:
                raise ProtocolError(f"report refers to unknown space {i}")
            grad = np.asarray(msg.mean_gradients[slot], dtype=float)
            if grad.shape != (int(dims[i]),):
                raise ProtocolError(
                    f"gradient for space {i} has shape {grad.shape}, "
                    f"expected ({dims[i]},)"
                )
            loss_est[i] += float(msg.mean_losses[slot]) / inclusion_probs[i]
            if i not in grad_est:
                grad_est[i] = np.zeros(int(dims[i]))
            grad_est[i] += grad / inclusion_probs[i]
    loss_est /= count
    for i in grad_est:
        grad_est[i] /= count
    return loss_est, grad_est


# ---------------------------------------------------------------------------
# Engine state and one-epoch driver


@dataclass
class ServerState:
    """Mutable server state threaded through epochs.

    ``log_p`` is the sampling distribution in log space; ``weights[i]`` the
    parameter vector of space ``i``, held either as a list of vectors or,
    when every space shares one width, as a (K, dim) matrix.  Bit counters
    accumulate the information bits of every message sent so far (summed
    over clients).
    """

    log_p: np.ndarray
    weights: list[np.ndarray] | np.ndarray
    rounds_done: int = 0
    epochs_done: int = 0
    uplink_bits: int = 0
    downlink_bits: int = 0


@dataclass(frozen=True)
class ClientBatch:
    """Per-client data and pre-drawn sampling randomness for a whole run.

    ``uniforms[j, t - 1]`` holds the uniform variates the server consumes
    when it samples the subset for client ``j`` at round ``t``; with one
    decision per epoch only the first-round slot of each epoch is read, so
    batched and unbatched runs consume identical randomness per decision.
    """

    xs: np.ndarray  # (clients, horizon, input_dim)
    ys: np.ndarray  # (clients, horizon)
    uniforms: np.ndarray  # (clients, horizon, subset_size)

    def __post_init__(self) -> None:
        if self.xs.ndim != 3 or self.ys.ndim != 2 or self.uniforms.ndim != 3:
            raise ProtocolError("xs must be (M,T,d), ys (M,T), uniforms (M,T,J)")
        if self.xs.shape[:2] != self.ys.shape or self.xs.shape[:2] != self.uniforms.shape[:2]:
            raise ProtocolError(
                f"inconsistent shapes: xs {self.xs.shape}, ys {self.ys.shape}, "
                f"uniforms {self.uniforms.shape}"
            )

    @property
    def count(self) -> int:
        return self.xs.shape[0]

    @property
    def horizon(self) -> int:
        return self.xs.shape[1]


@dataclass(frozen=True)
class RunSetup:
    """Immutable per-run configuration shared by every epoch.

    The cached properties gather per-space constants once per run; epochs
    slice them instead of rebuilding arrays from the space objects.
    """

    spaces: tuple[HypothesisSpace, ...]
    loss: Loss
    subset_size: int
    epochs: EpochSchedule
    mirror_rate: float  # eta, constant across epochs
    param_rates: Callable[[int], np.ndarray]  # epoch -> (K,) step sizes
    audit: "AuditLog | None" = None

    @property
    def num_spaces(self) -> int:
        return len(self.spaces)

    @cached_property
    def dims(self) -> np.ndarray:
        return np.array([s.dim for s in self.spaces], dtype=np.int64)

    @cached_property
    def scales(self) -> np.ndarray:
        return np.array([s.loss_bound for s in self.spaces], dtype=float)

    @cached_property
    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-space (loss limit, squared gradient-norm limit) for bound checks."""
        tol = 1e-9
        loss_limits = self.scales * (1.0 + 1e-12) + tol
        lipschitz = np.array([s.lipschitz_bound for s in self.spaces])
        g_limits = lipschitz * (1.0 + 1e-12) + tol
        return loss_limits, g_limits * g_limits

    @cached_property
    def constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-space (box?, bound) encoding for row-batched projections."""
        return _constraint_encoding(self.spaces, np.arange(self.num_spaces))

    @cached_property
    def feature_columns(self) -> np.ndarray | None:
        """Input column per space when every map reads one coordinate, else None."""
        return _fused_columns(self.spaces)

    @cached_property
    def identity_features(self) -> bool:
        """True when every space feeds the raw input through unchanged."""
        return all(isinstance(s.feature_map, IdentityMap) for s in self.spaces)


@dataclass
class TraceBuffers:
    """Round-by-round trace of a run, one (horizon, clients) panel per field."""

    predictions: np.ndarray
    losses: np.ndarray
    leads: np.ndarray
    uplink_bits: np.ndarray
    downlink_bits: np.ndarray

    @staticmethod
    def allocate(horizon: int, clients: int) -> "TraceBuffers":
        return TraceBuffers(
            predictions=np.zeros((horizon, clients)),
            losses=np.zeros((horizon, clients)),
            leads=np.zeros((horizon, clients), dtype=np.int64),
            uplink_bits=np.zeros((horizon, clients), dtype=np.int64),
            downlink_bits=np.zeros((horizon, clients), dtype=np.int64),
        )


@dataclass
class AuditLog:
    """Optional per-epoch verification of the wire path.

    When attached to a run, every epoch is also executed through the
    message/frame/aggregation code path and cross-checked against the
    vectorized engine: frame round-trips must reproduce indices exactly and
    floats to single precision, the closed-form bit account must equal the
    frame's actual payload bits, and :func:`aggregate_reports` must agree
    with the engine's aggregation to near machine precision.
    """

    frames_checked: int = 0
    mismatches: list[str] = field(default_factory=list)

    def note(self, message: str) -> None:
        self.mismatches.append(message)

    @property
    def clean(self) -> bool:
        return not self.mismatches


def _audit_epoch(
    audit: AuditLog,
    setup: RunSetup,
    epoch: int,
    indices: np.ndarray,
    broadcast_weights: list[np.ndarray],
    mean_losses: np.ndarray,
    mean_grads: dict[int, np.ndarray],
    rows_by_space: dict[int, np.ndarray],
    inclusion: np.ndarray,
    loss_est: np.ndarray,
    grad_est: dict[int, np.ndarray],
    down_bits: np.ndarray,
    up_bits: np.ndarray,
) -> None:
    """Replay one epoch through the serialized message path and compare."""
    K = setup.num_spaces
    dims = setup.dims
    clients = indices.shape[0]
    reports = []
    for j in range(clients):
        idx = tuple(int(i) for i in indices[j])
        down = DownlinkMessage(
            epoch, j, idx, tuple(broadcast_weights[i] for i in idx)
        )
        frame = encode_downlink(down, K)
        if frame.payload_bits != account_bits(down, K):
            audit.note(f"epoch {epoch} client {j}: downlink bit account mismatch")
        if frame.payload_bits != int(down_bits[j]):
            audit.note(f"epoch {epoch} client {j}: engine downlink bits mismatch")
        back = decode_frame(Frame.from_bytes(frame.to_bytes()), K, dims)
        if not isinstance(back, DownlinkMessage) or back.indices != idx:
            audit.note(f"epoch {epoch} client {j}: downlink index round-trip failed")
        else:
            for slot, i in enumerate(idx):
                want = np.asarray(down.weights[slot], dtype="<f4").astype(float)
                if not np.array_equal(back.weights[slot], want):
                    audit.note(
                        f"epoch {epoch} client {j}: downlink float round-trip failed"
                    )
                    break
        # Build the client's report from the engine's per-space accumulators.
        slots = []
        grads = []
        for i in idx:
            pos = int(np.searchsorted(rows_by_space[i], j))
            slots.append(mean_losses[j, i])
            grads.append(mean_grads[i][pos])
        up = UplinkMessage(epoch, j, idx, np.array(slots), tuple(grads))
        uframe = encode_uplink(up, K)
        if uframe.payload_bits != account_bits(up, K):
            audit.note(f"epoch {epoch} client {j}: uplink bit account mismatch")
        if uframe.payload_bits != int(up_bits[j]):
            audit.note(f"epoch {epoch} client {j}: engine uplink bits mismatch")
        uback = decode_frame(Frame.from_bytes(uframe.to_bytes()), K, dims)
        if not isinstance(uback, UplinkMessage) or uback.indices != idx:
            audit.note(f"epoch {epoch} client {j}: uplink round-trip failed")
        reports.append(up)
        audit.frames_checked += 2
    agg_loss, agg_grad = aggregate_reports(reports, inclusion, K, dims)
    if not np.allclose(agg_loss, loss_est, rtol=1e-12, atol=1e-12):
        audit.note(f"epoch {epoch}: aggregated losses disagree with engine")
    for i, g in grad_est.items():
        if i not in agg_grad or not np.allclose(agg_grad[i], g, rtol=1e-12, atol=1e-12):
            audit.note(f"epoch {epoch}: aggregated gradient for space {i} disagrees")


def _check_bounds(
    losses: np.ndarray,
    dvals: np.ndarray,
    features: np.ndarray,
    space: HypothesisSpace,
    index: int,
    round_index: int,
) -> None:
    """Abort the run if a loss or gradient breaks its declared bound."""
    tol = 1e-9
    worst = losses.max(initial=0.0)
    if worst > space.loss_bound * (1.0 + 1e-12) + tol:
        raise RunInvariantError(
            f"round {round_index}: space {index} produced loss {float(worst):.6g} "
            f"above its declared bound {space.loss_bound:.6g}; the step-size "
            f"schedule is invalid for this data"
        )
    # compare squared norms; take the square root only to report a failure
    gsq = ((dvals * dvals) * (features * features).sum(axis=1)).max(initial=0.0)
    g_limit = space.lipschitz_bound * (1.0 + 1e-12) + tol
    if gsq > g_limit * g_limit:
        raise RunInvariantError(
            f"round {round_index}: space {index} produced gradient norm "
            f"{float(np.sqrt(gsq)):.6g} above its declared bound "
            f"{space.lipschitz_bound:.6g}; the step-size schedule is invalid "
            f"for this data"
        )


def run_epoch(
    state: ServerState,
    setup: RunSetup,
    clients: ClientBatch,
    epoch: int,
    buffers: TraceBuffers,
) -> None:
    """Advance the cooperative protocol by one communication epoch.

    Epoch ``epoch`` (1-based): broadcast current models to every client's
    sampled subset, let each client predict with its lead space for every
    round of the epoch, collect epoch-averaged raw losses/gradients, apply
    importance weights, average over clients, and take one mirror step on
    the sampling distribution plus one projected-gradient step per touched
    space.  Writes per-round trace rows into ``buffers`` and accumulates
    exact bit counts in ``state``.
    """

    sched = setup.epochs
    if epoch != state.epochs_done + 1:
        raise ProtocolError(
            f"epochs must run in order: got {epoch}, expected {state.epochs_done + 1}"
        )
    N = sched.rounds_per_epoch
    t0 = (epoch - 1) * N  # 0-based index of the epoch's first round
    K = setup.num_spaces
    J = setup.subset_size
    dims = setup.dims

    probs = materialize(state.log_p)
    indices = subsets_from_uniforms(probs, J, clients.uniforms[:, t0, :])
    inclusion = inclusion_probabilities(probs, J)
    leads = indices[:, 0]

    q = bits_per_index(K)
    down_bits = 32 * dims[indices].sum(axis=1) + J * q
    up_bits = down_bits + 32 * J

    if (dims == dims[0]).all():
        loss_est = _epoch_flat(
            state, setup, clients, epoch, buffers, indices, inclusion,
            down_bits, up_bits,
        )
    else:
        loss_est = _epoch_grouped(
            state, setup, clients, epoch, buffers, indices, inclusion,
            down_bits, up_bits,
        )

    state.log_p = entropy_step_log_batch(
        state.log_p[None, :], loss_est[None, :], setup.scales, setup.mirror_rate
    )[0]
    buffers.leads[t0:t0 + N] = leads[None, :]
    buffers.downlink_bits[t0] = down_bits
    buffers.uplink_bits[t0 + N - 1] = up_bits
    state.downlink_bits += int(down_bits.sum())
    state.uplink_bits += int(up_bits.sum())
    state.rounds_done += N
    state.epochs_done = epoch


def _constraint_encoding(
    spaces: Sequence[HypothesisSpace], touched: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-space constraints as (box?, bound) arrays for row-batched steps."""
    box = np.empty(touched.size, dtype=bool)
    bound = np.empty(touched.size, dtype=float)
    for k, i in enumerate(touched):
        c = spaces[int(i)].constraint
        if isinstance(c, InfBox):
            box[k] = True
            bound[k] = c.half_width
        else:
            box[k] = False
            bound[k] = c.radius
    return box, bound


def _fused_columns(spaces: Sequence[HypothesisSpace]) -> np.ndarray | None:
    """Input column per space if every map reads a single coordinate.

    Such runs can gather all (client, space) feature values with one indexing
    operation instead of a per-space loop; the gathered floats are the same
    bytes either way.  Returns None when any map is of another kind.
    """
    maps = [s.feature_map for s in spaces]
    if all(isinstance(m, CoordinateMap) for m in maps):
        return np.array([m.index for m in maps], dtype=np.int64)
    return None


def _check_bounds_flat(
    closs: np.ndarray,
    gsq: np.ndarray,
    starts: np.ndarray,
    touched: np.ndarray,
    spaces: Sequence[HypothesisSpace],
    loss_limit: np.ndarray,
    g_limit_sq: np.ndarray,
    round_index: int,
) -> None:
    """Segment-wise :func:`_check_bounds` over flat sorted arrays.

    ``gsq`` holds squared per-example gradient norms; max-reductions are
    order-insensitive, so the per-segment maxima equal the grouped ones.
    """
    worst_loss = np.maximum.reduceat(closs, starts)
    bad = worst_loss > loss_limit
    if bad.any():
        k = int(bad.nonzero()[0][0])
        i = int(touched[k])
        raise RunInvariantError(
            f"round {round_index}: space {i} produced loss "
            f"{float(worst_loss[k]):.6g} above its declared bound "
            f"{spaces[i].loss_bound:.6g}; the step-size schedule is invalid "
            f"for this data"
        )
    worst_gsq = np.maximum.reduceat(gsq, starts)
    bad = worst_gsq > g_limit_sq
    if bad.any():
        k = int(bad.nonzero()[0][0])
        i = int(touched[k])
        raise RunInvariantError(
            f"round {round_index}: space {i} produced gradient norm "
            f"{float(np.sqrt(worst_gsq[k])):.6g} above its declared bound "
            f"{spaces[i].lipschitz_bound:.6g}; the step-size schedule is "
            f"invalid for this data"
        )


def _epoch_flat(
    state: ServerState,
    setup: RunSetup,
    clients: ClientBatch,
    epoch: int,
    buffers: TraceBuffers,
    indices: np.ndarray,
    inclusion: np.ndarray,
    down_bits: np.ndarray,
    up_bits: np.ndarray,
) -> np.ndarray:
    """Epoch core with all per-(client, space) work in flat sorted arrays.

    Requires every space to share one feature dimension.  Produces the same
    floats as :func:`_epoch_grouped` bit for bit: element-wise work does not
    depend on the grouping, each per-space gradient reduction visits the
    same rows in the same ascending order, and the bound checks reduce with
    max, which is order-free.
    """
    sched = setup.epochs
    N = sched.rounds_per_epoch
    t0 = (epoch - 1) * N
    M = clients.count
    K = setup.num_spaces
    spaces = setup.spaces
    dim = spaces[0].dim

    groups = group_subsets(indices)
    touched = groups.touched
    starts = groups.bounds[:-1]
    rows = groups.rows
    flat_spaces = groups.space_ids()
    lead_mask = groups.slots == 0
    lead_rows = rows[lead_mask]

    if setup.audit is not None:
        broadcast_weights = [w.copy() for w in state.weights]

    weights = state.weights
    if isinstance(weights, np.ndarray):
        w_stack = weights[touched]
    else:
        w_stack = np.stack([weights[int(i)] for i in touched])
    w_flat = w_stack[groups.segment_of]

    loss_limit = setup.limits[0][touched]
    g_limit_sq = setup.limits[1][touched]
    columns = setup.feature_columns
    flat_columns = columns[flat_spaces] if columns is not None else None
    identity = setup.identity_features

    loss_sums = np.zeros((M, K))
    grad_sums = np.zeros((rows.size, dim))
    phi = None if flat_columns is not None or identity else np.empty((rows.size, dim))
    for t in range(t0, t0 + N):
        # the fused gathers pick the same floats the per-space maps would
        if flat_columns is not None:
            yt = clients.ys[rows, t]
            phi = clients.xs[rows, t, flat_columns][:, None]
        elif identity:
            yt = clients.ys[rows, t]
            phi = clients.xs[rows, t, :]
        else:
            xt = clients.xs[:, t, :][rows]
            yt = clients.ys[:, t][rows]
            for k in range(touched.size):
                seg = slice(starts[k], groups.bounds[k + 1])
                phi[seg] = spaces[int(touched[k])].feature_map(xt[seg])
        # row-wise multiply-add rather than a matmul: the noncooperative
        # engine predicts with per-client weight rows, and the two code
        # paths must produce bitwise-equal floats at M=1
        values = (phi * w_flat).sum(axis=1)
        closs = loss_value(setup.loss, values, yt)
        dvals = loss_derivative(setup.loss, values, yt)
        gsq = (dvals * dvals) * (phi * phi).sum(axis=1)
        _check_bounds_flat(closs, gsq, starts, touched, spaces,
                           loss_limit, g_limit_sq, t + 1)
        loss_sums[rows, flat_spaces] += closs  # (row, space) pairs are unique
        grad_sums += dvals[:, None] * phi
        buffers.predictions[t, lead_rows] = values[lead_mask]
        buffers.losses[t, lead_rows] = closs[lead_mask]

    # Server aggregation: mean over the epoch, importance weight, mean over
    # clients.  Spaces outside every subset contribute exact zeros.
    mean_losses = loss_sums / N
    loss_est = (mean_losses / inclusion[None, :]).sum(axis=0) / M
    grad_est = np.empty((touched.size, dim))
    mean_grads: dict[int, np.ndarray] = {}
    for k in range(touched.size):
        i = int(touched[k])
        mg = grad_sums[starts[k]:groups.bounds[k + 1]] / N
        grad_est[k] = (mg / inclusion[i]).sum(axis=0) / M
        if setup.audit is not None:
            mean_grads[i] = mg

    if setup.audit is not None:
        rows_by_space = {
            int(touched[k]): rows[starts[k]:groups.bounds[k + 1]]
            for k in range(touched.size)
        }
        _audit_epoch(
            setup.audit,
            setup,
            epoch,
            indices,
            broadcast_weights,
            mean_losses,
            mean_grads,
            rows_by_space,
            inclusion,
            loss_est,
            {int(touched[k]): grad_est[k] for k in range(touched.size)},
            down_bits,
            up_bits,
        )

    rates = setup.param_rates(epoch)
    box_mask, bound = setup.constraints
    projected = project_rows_per_row(
        w_stack - rates[touched][:, None] * grad_est,
        box_mask[touched], bound[touched],
    )
    if isinstance(weights, np.ndarray):
        weights[touched] = projected
    else:
        for k in range(touched.size):
            weights[int(touched[k])] = projected[k]
    return loss_est


def _epoch_grouped(
    state: ServerState,
    setup: RunSetup,
    clients: ClientBatch,
    epoch: int,
    buffers: TraceBuffers,
    indices: np.ndarray,
    inclusion: np.ndarray,
    down_bits: np.ndarray,
    up_bits: np.ndarray,
) -> np.ndarray:
    """Epoch core grouped space by space; handles mixed feature dimensions."""
    sched = setup.epochs
    N = sched.rounds_per_epoch
    t0 = (epoch - 1) * N
    M = clients.count
    K = setup.num_spaces
    J = setup.subset_size
    leads = indices[:, 0]

    if J == K:
        # every client samples every space; membership scans are redundant
        all_rows = np.arange(M)
        touched = list(range(K))
        rows_by_space = {i: all_rows for i in touched}
        lead_slots = {i: (leads == i).nonzero()[0] for i in touched}
    else:
        touched = [int(i) for i in np.unique(indices)]
        rows_by_space = {
            i: (indices == i).any(axis=1).nonzero()[0] for i in touched
        }
        lead_slots = {
            i: (leads[rows_by_space[i]] == i).nonzero()[0] for i in touched
        }

    if setup.audit is not None:
        broadcast_weights = [w.copy() for w in state.weights]

    loss_sums = np.zeros((M, K))
    grad_sums: dict[int, np.ndarray] = {}

    for t in range(t0, t0 + N):
        xt = clients.xs[:, t, :]
        yt = clients.ys[:, t]
        for i in touched:
            rows = rows_by_space[i]
            space = setup.spaces[i]
            phi = space.feature_map(xt[rows])
            # row-wise multiply-add rather than a matmul: the noncooperative
            # engine predicts with per-client weight rows, and the two code
            # paths must produce bitwise-equal floats at M=1
            values = (phi * state.weights[i][None, :]).sum(axis=1)
            closs = loss_value(setup.loss, values, yt[rows])
            dvals = loss_derivative(setup.loss, values, yt[rows])
            _check_bounds(closs, dvals, phi, space, i, t + 1)
            loss_sums[rows, i] += closs
            acc = grad_sums.get(i)
            if acc is None:
                grad_sums[i] = dvals[:, None] * phi
            else:
                acc += dvals[:, None] * phi
            slots = lead_slots[i]
            if slots.size:
                lead_rows = rows[slots]
                buffers.predictions[t, lead_rows] = values[slots]
                buffers.losses[t, lead_rows] = closs[slots]

    # Server aggregation: mean over the epoch, importance weight, mean over
    # clients.  Spaces outside every subset contribute exact zeros.
    mean_losses = loss_sums / N
    loss_est = (mean_losses / inclusion[None, :]).sum(axis=0) / M
    grad_est: dict[int, np.ndarray] = {}
    mean_grads: dict[int, np.ndarray] = {}
    for i in touched:
        mean_grads[i] = grad_sums[i] / N
        grad_est[i] = (mean_grads[i] / inclusion[i]).sum(axis=0) / M

    if setup.audit is not None:
        _audit_epoch(
            setup.audit,
            setup,
            epoch,
            indices,
            broadcast_weights,
            mean_losses,
            mean_grads,
            rows_by_space,
            inclusion,
            loss_est,
            grad_est,
            down_bits,
            up_bits,
        )

    rates = setup.param_rates(epoch)
    for i in touched:
        state.weights[i] = step_rows(
            setup.spaces[i].constraint,
            state.weights[i][None, :],
            grad_est[i][None, :],
            float(rates[i]),
        )[0]
    return loss_est
