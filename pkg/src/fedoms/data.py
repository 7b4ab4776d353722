"""Dataset ingestion, preprocessing, partitioning, and synthetic generators.

Everything here produces a :class:`Streams` bundle: per-client example
sequences of equal length, ready for the learners.  Real datasets come in
through :func:`ingest_csv` + :func:`preprocess_and_partition`; the
adversarial generators build the hard instances used by the lower-bound
style experiments; :func:`synthetic_linear` and :func:`write_regression_csv`
provide well-behaved regression streams for smoke tests and benchmarks.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import ROLE_ADVERSARY, ROLE_DATA, ROLE_PERMUTE, stream

__all__ = [
    "DataError",
    "RawDataset",
    "Streams",
    "AdversarialSpec",
    "ingest_csv",
    "preprocess_and_partition",
    "generate_adversarial",
    "default_bias",
    "synthetic_linear",
    "write_regression_csv",
]

logger = logging.getLogger("fedoms.data")


class DataError(ValueError):
    """Raised for malformed datasets or generator specs."""


@dataclass(frozen=True)
class RawDataset:
    """A parsed numeric table: feature matrix, target vector, column names."""

    features: np.ndarray  # (rows, input_dim)
    targets: np.ndarray  # (rows,)
    feature_names: tuple[str, ...]
    target_name: str

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Streams:
    """Per-client example sequences of equal length.

    ``xs[j, t - 1]`` / ``ys[j, t - 1]`` is client ``j``'s example at round
    ``t``.  ``meta`` records provenance (generator kind, hidden parameters,
    source file) for the run summary.
    """

    xs: np.ndarray  # (clients, horizon, input_dim)
    ys: np.ndarray  # (clients, horizon)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.xs.ndim != 3 or self.ys.ndim != 2:
            raise DataError(f"xs must be (M,T,d) and ys (M,T), got {self.xs.shape}, {self.ys.shape}")
        if self.xs.shape[:2] != self.ys.shape:
            raise DataError(f"xs {self.xs.shape} inconsistent with ys {self.ys.shape}")

    @property
    def clients(self) -> int:
        return self.xs.shape[0]

    @property
    def horizon(self) -> int:
        return self.xs.shape[1]

    @property
    def input_dim(self) -> int:
        return self.xs.shape[2]


# ---------------------------------------------------------------------------
# Ingestion and preprocessing


def ingest_csv(path: str | Path, target_column: str | int = -1) -> RawDataset:
    """Parse a rectangular numeric CSV with a header row.

    ``target_column`` selects the target by header name or by position
    (negative indices count from the right).  Every other column becomes a
    feature.  Parse failures report the offending row and column.
    """

    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if isinstance(target_column, int):
            if not -len(header) <= target_column < len(header):
                raise DataError(
                    f"{path}: target column index {target_column} out of range for "
                    f"{len(header)} columns {header}"
                )
            target_pos = target_column % len(header)
        else:
            if target_column not in header:
                raise DataError(
                    f"{path}: no column named {target_column!r}; available columns: "
                    f"{header}"
                )
            target_pos = header.index(target_column)
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue  # ignore blank lines
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {line_no} has {len(row)} cells, expected "
                    f"{len(header)}"
                )
            parsed = []
            for col, cell in enumerate(row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {line_no}, column {header[col]!r}: "
                        f"non-numeric cell {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=float)
    features = np.delete(table, target_pos, axis=1)
    feature_names = tuple(h for i, h in enumerate(header) if i != target_pos)
    logger.info("ingested %s: %d rows, %d features", path, table.shape[0], features.shape[1])
    return RawDataset(features, table[:, target_pos], feature_names, header[target_pos])


def preprocess_and_partition(dataset: RawDataset, clients: int, seed: int) -> Streams:
    """Rescale, shuffle, and split a dataset into per-client streams.

    Features are min-max rescaled to [-1, 1] and targets to [0, 1] using the
    global extrema of the whole dataset; constant columns map to 0 with a
    logged warning.  Rows are then randomly permuted (deterministic in
    ``seed``) and split contiguously into ``clients`` streams of equal
    length, dropping any remainder.
    """

    if clients < 1:
        raise DataError(f"clients must be >= 1, got {clients}")
    n = dataset.rows
    if n < clients:
        raise DataError(f"{n} rows cannot be split across {clients} clients")
    x = np.asarray(dataset.features, dtype=float)
    y = np.asarray(dataset.targets, dtype=float)

    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    flat = span == 0.0
    if flat.any():
        names = [dataset.feature_names[i] for i in np.flatnonzero(flat)]
        logger.warning("constant feature columns %s mapped to 0", names)
    safe = np.where(flat, 1.0, span)
    xs = -1.0 + 2.0 * (x - lo) / safe
    xs[:, flat] = 0.0

    y_lo, y_hi = y.min(), y.max()
    if y_hi == y_lo:
        logger.warning("constant target column mapped to 0")
        ys = np.zeros_like(y)
    else:
        ys = (y - y_lo) / (y_hi - y_lo)

    order = stream(seed, ROLE_PERMUTE).permutation(n)
    horizon = n // clients
    dropped = n - horizon * clients
    if dropped:
        logger.warning("dropping %d of %d rows to split evenly across %d clients",
                       dropped, n, clients)
    keep = order[: horizon * clients]
    return Streams(
        xs=xs[keep].reshape(clients, horizon, -1),
        ys=ys[keep].reshape(clients, horizon),
        meta={
            "source": "preprocessed",
            "rows": int(n),
            "dropped": int(dropped),
            "seed": int(seed),
        },
    )


# ---------------------------------------------------------------------------
# Adversarial generators


def default_bias(num_spaces: int, subset_size: int, horizon: int) -> float:
    """The hidden-arm bias at which the instance sits on the detection edge."""
    return float(np.sqrt(num_spaces) / (3.0 * np.sqrt(subset_size * horizon)))


@dataclass(frozen=True)
class AdversarialSpec:
    """Configuration of a hard-instance generator.

    ``kind`` is ``"bernoulli_symmetric"`` (all coordinates and labels are
    fair ±1 coins; no space is better than any other) or ``"biased_arm"``
    (one hidden coordinate is 1 slightly more often than the rest; labels
    are all 1).  Every client sees the same stream.  ``bias`` defaults to
    the detection-edge value √K/(3√(J·T)).
    """

    kind: str
    num_spaces: int
    input_dim: int
    horizon: int
    clients: int
    seed: int
    subset_size: int = 2
    bias: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("bernoulli_symmetric", "biased_arm"):
            raise DataError(f"unknown adversarial kind {self.kind!r}")
        if self.num_spaces > self.input_dim:
            raise DataError(
                f"num_spaces {self.num_spaces} exceeds input_dim {self.input_dim}"
            )
        if self.num_spaces > self.horizon:
            raise DataError(
                f"num_spaces {self.num_spaces} exceeds horizon {self.horizon}"
            )
        if self.bias is not None and not 0.0 <= self.bias <= 1.0:
            raise DataError(f"bias must be in [0, 1], got {self.bias}")

    @property
    def effective_bias(self) -> float:
        if self.bias is not None:
            return self.bias
        return default_bias(self.num_spaces, self.subset_size, self.horizon)


def generate_adversarial(spec: AdversarialSpec) -> Streams:
    """Materialize the hard instance described by ``spec``.

    Both kinds embed the K decision coordinates into the first K of
    ``input_dim`` coordinates (the rest are zero) and replicate one shared
    stream across all clients, so every client faces the same adversary.
    """

    rng = stream(spec.seed, ROLE_ADVERSARY)
    T, K, d = spec.horizon, spec.num_spaces, spec.input_dim
    x = np.zeros((T, d))
    meta: dict = {"kind": spec.kind, "seed": int(spec.seed)}
    if spec.kind == "bernoulli_symmetric":
        x[:, :K] = 2.0 * (rng.random((T, K)) < 0.5) - 1.0
        y = 2.0 * (rng.random(T) < 0.5) - 1.0
    else:  # biased_arm
        hidden = int(rng.integers(K))
        rho = spec.effective_bias
        probs = np.full(K, (1.0 - rho) / 2.0)
        probs[hidden] = (1.0 + rho) / 2.0
        x[:, :K] = (rng.random((T, K)) < probs[None, :]).astype(float)
        y = np.ones(T)
        meta.update(hidden_arm=hidden, bias=float(rho))
    xs = np.broadcast_to(x, (spec.clients, T, d)).copy()
    ys = np.broadcast_to(y, (spec.clients, T)).copy()
    return Streams(xs=xs, ys=ys, meta=meta)


# ---------------------------------------------------------------------------
# Synthetic regression streams


def synthetic_linear(
    input_dim: int,
    clients: int,
    horizon: int,
    seed: int,
    noise: float = 0.05,
    slope_norm: float = 0.3,
    intercept: float = 0.5,
) -> Streams:
    """I.i.d. linear-regression streams with a planted parameter vector.

    The first coordinate is a constant 1 (intercept); the rest are uniform
    on [-1, 1] and independent across clients and rounds.  Targets are
    ``intercept + <slope, x[1:]> + noise`` clipped to [0, 1], with the slope
    drawn once (shared by all clients) at norm ``slope_norm``.  The planted
    vector has total norm sqrt(intercept^2 + slope_norm^2), so nested-radius
    space grids straddle it: small radii underfit, large radii admit it.
    """

    if input_dim < 2:
        raise DataError(f"input_dim must be >= 2 (intercept + slopes), got {input_dim}")
    planted = stream(seed, ROLE_DATA, 0)
    direction = planted.standard_normal(input_dim - 1)
    direction /= np.linalg.norm(direction)
    slope = slope_norm * direction
    xs = np.empty((clients, horizon, input_dim))
    ys = np.empty((clients, horizon))
    for j in range(clients):
        client_rng = stream(seed, ROLE_DATA, 1 + j)
        rest = client_rng.uniform(-1.0, 1.0, size=(horizon, input_dim - 1))
        eps = client_rng.standard_normal(horizon)
        xs[j, :, 0] = 1.0
        xs[j, :, 1:] = rest
        ys[j] = np.clip(intercept + rest @ slope + noise * eps, 0.0, 1.0)
    weight = np.concatenate([[intercept], slope])
    return Streams(
        xs=xs,
        ys=ys,
        meta={
            "kind": "synthetic_linear",
            "seed": int(seed),
            "noise": float(noise),
            "planted_norm": float(np.linalg.norm(weight)),
        },
    )


def write_regression_csv(
    path: str | Path,
    rows: int,
    input_dim: int,
    seed: int,
    noise: float = 0.05,
) -> Path:
    """Write a nonlinear regression CSV in the shape of a UCI-style table.

    Features are uniform on [-1, 1]; the target is a smooth mixture of two
    Gaussian bumps over a random 3-dimensional projection of the features,
    plus noise — learnable by Gaussian-kernel features but not by any
    single linear space.  Header row ``f0..f{d-1},target``.
    """

    if input_dim < 3:
        raise DataError(f"input_dim must be >= 3, got {input_dim}")
    rng = stream(seed, ROLE_DATA, 7)
    x = rng.uniform(-1.0, 1.0, size=(rows, input_dim))
    coords = rng.permutation(input_dim)[:3]
    centers = rng.uniform(-0.6, 0.6, size=(2, 3))
    proj = x[:, coords]
    d0 = ((proj - centers[0]) ** 2).sum(axis=1)
    d1 = ((proj - centers[1]) ** 2).sum(axis=1)
    y = np.exp(-d0 / 0.8) - 0.7 * np.exp(-d1 / 0.5) + noise * rng.standard_normal(rows)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(input_dim)] + ["target"])
        for r in range(rows):
            writer.writerow([repr(float(v)) for v in x[r]] + [repr(float(y[r]))])
    return path
