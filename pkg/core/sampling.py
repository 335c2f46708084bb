"""Collocation, boundary, initial and observation point sets over hyperrectangles.

Point matrices put time first when the domain has a time axis: rows are
``(t, x1, ..., xd)``. Random draws come from ``utils.rng`` streams so every
set depends only on ``(seed, purpose, ordinal)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from core.errors import SamplingError
from models.schemas import LOSS_TERMS, SamplerSpec, Scheme
from utils.logger import logger
from utils.rng import Stream, generator

Bounds = tuple[float, float]


@dataclass(frozen=True)
class Domain:
    space: tuple[Bounds, ...]
    time: Optional[Bounds] = None

    def __post_init__(self):
        object.__setattr__(self, "space", tuple((float(lo), float(hi)) for lo, hi in self.space))
        if len(self.space) > 3:
            raise SamplingError(f"at most 3 space dimensions are supported, got {len(self.space)}")
        if not self.space and self.time is None:
            raise SamplingError("domain needs a space or a time axis")
        for axis, (lo, hi) in enumerate(self.space):
            if not lo < hi:
                raise SamplingError(f"space axis {axis} has lo={lo} >= hi={hi}")
        if self.time is not None:
            t0, horizon = (float(v) for v in self.time)
            if t0 != 0.0 or horizon <= 0:
                raise SamplingError(f"time axis must be (0, T) with T > 0, got {self.time}")
            object.__setattr__(self, "time", (t0, horizon))

    @property
    def d(self) -> int:
        return len(self.space)

    @property
    def has_time(self) -> bool:
        return self.time is not None

    @property
    def bounds(self) -> tuple[Bounds, ...]:
        """Per-column bounds of a point matrix, time first."""
        return ((self.time,) if self.has_time else ()) + self.space

    @property
    def input_dim(self) -> int:
        return len(self.bounds)

    def contains(self, points: np.ndarray) -> bool:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return bool(np.all((points >= lo) & (points <= hi)))


@dataclass(frozen=True)
class BoundarySet:
    """Points on the spatial facets; facet ``2*axis`` is the low side, ``2*axis+1`` the high side."""

    points: np.ndarray
    facet: np.ndarray
    axis: np.ndarray
    sign: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self):
        return iter(zip(self.points, self.facet, self.sign))

    def take(self, index: np.ndarray) -> "BoundarySet":
        return BoundarySet(self.points[index], self.facet[index], self.axis[index], self.sign[index])


@dataclass(frozen=True)
class ObservationSet:
    points: np.ndarray
    values: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if points.shape[0] < 1:
            raise SamplingError("observation set is empty")
        if values.shape[0] != points.shape[0]:
            raise SamplingError(f"{points.shape[0]} observation points but {values.shape[0]} values")
        if not np.all(np.isfinite(values)):
            raise SamplingError("observation values must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.points.shape[0]

    def take(self, index: np.ndarray) -> "ObservationSet":
        return ObservationSet(self.points[index], self.values[index], self.source)


@dataclass
class CollocationBatch:
    interior: np.ndarray
    boundary: Optional[BoundarySet] = None
    initial: Optional[np.ndarray] = None
    observations: Optional[ObservationSet] = None
    # meta-model samples: term -> name -> one value per point
    theta: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def _grid_count(n: int, axes: int) -> int:
    root = int(round(n ** (1.0 / axes)))
    for candidate in (root - 1, root, root + 1):
        if candidate >= 1 and candidate ** axes == n:
            return candidate
    raise SamplingError(f"grid size {n} is not a perfect {axes}-th power")


def _box_points(bounds: Sequence[Bounds], n: int, scheme: Scheme, rng_factory) -> np.ndarray:
    if n < 1:
        raise SamplingError(f"need at least one point, got n={n}")
    if not bounds:
        return np.zeros((1, 0))
    if scheme == "grid":
        per_axis = _grid_count(n, len(bounds))
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)
    if scheme == "uniform":
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        return rng_factory().uniform(lo, hi, size=(n, len(bounds)))
    raise SamplingError(f"unknown sampling scheme '{scheme}'")


def sample_interior(
    dom: Domain, n: int, scheme: Scheme = "grid", seed: int = 0, ordinal: int = 0, stream: Stream = Stream.INTERIOR
) -> np.ndarray:
    """n points of the space-time box; grid includes the endpoints of every axis."""
    return _box_points(dom.bounds, n, scheme, lambda: generator(seed, stream, ordinal))


def sample_boundary(
    dom: Domain, n_per_facet: int, scheme: Scheme = "grid", seed: int = 0, ordinal: int = 0
) -> BoundarySet:
    """n_per_facet points on each of the 2d spatial facets.

    A facet with no free axis (the endpoints of a stationary 1-D interval) is a
    single point and contributes one row.
    """
    if dom.d < 1:
        raise SamplingError("boundary sampling needs at least one space dimension")
    offset = 1 if dom.has_time else 0
    points, facets, axes, signs = [], [], [], []
    for axis in range(dom.d):
        column = offset + axis
        free = [b for i, b in enumerate(dom.bounds) if i != column]
        for side, value in enumerate(dom.space[axis]):
            facet = 2 * axis + side
            free_points = _box_points(
                free, n_per_facet, scheme, lambda: generator(seed, Stream.BOUNDARY, ordinal, facet)
            )
            rows = np.insert(free_points, column, value, axis=1)
            points.append(rows)
            facets.append(np.full(rows.shape[0], facet))
            axes.append(np.full(rows.shape[0], axis))
            signs.append(np.full(rows.shape[0], -1.0 if side == 0 else 1.0))
    return BoundarySet(np.concatenate(points), np.concatenate(facets), np.concatenate(axes), np.concatenate(signs))


def sample_initial(dom: Domain, m: int, scheme: Scheme = "grid", seed: int = 0, ordinal: int = 0) -> np.ndarray:
    """Spatial points of the t=0 slice as an m x d matrix.

    An ODE has a single initial instant, returned as m empty rows so that each
    row can carry its own theta in a meta-model run.
    """
    if not dom.has_time:
        raise SamplingError("stationary problem: the domain has no time axis, so no initial slice")
    if dom.d == 0:
        if m < 1:
            raise SamplingError(f"need at least one point, got n={m}")
        return np.zeros((m, 0))
    return _box_points(dom.space, m, scheme, lambda: generator(seed, Stream.INITIAL, ordinal))


def minibatch(points: np.ndarray, batch_size: int, seed: int, epoch: int, key: int = 0) -> Iterator[np.ndarray]:
    """Epoch-seeded permutation cut into contiguous slices; the last partial batch is kept."""
    n = len(points)
    if batch_size <= 0:
        raise SamplingError(f"batch size must be positive, got {batch_size}")
    if batch_size > n:
        raise SamplingError(f"batch size {batch_size} exceeds the {n} available points")
    order = generator(seed, Stream.MINIBATCH, key, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield points[order[start:start + batch_size]]


class CollocationSampler:
    """The dataloader: produces the CollocationBatch used at each optimization step."""

    def __init__(
        self,
        domain: Domain,
        spec: SamplerSpec,
        seed: int = 0,
        batch_sizes: Optional[Mapping[str, int]] = None,
        observations: Optional[ObservationSet] = None,
        theta_ranges: Optional[Mapping[str, Bounds]] = None,
        with_boundary: bool = True,
    ):
        self.domain = domain
        self.spec = spec
        self.seed = seed
        self.batch_sizes = dict(batch_sizes or {})
        self.observations = observations
        self.theta_ranges = dict(theta_ranges or {})
        self.with_boundary = with_boundary and domain.d >= 1
        self.n_per_facet = spec.n_per_facet or max(1, spec.n_interior // (4 * max(domain.d, 1)))
        self.n_initial = spec.n_initial or (self.n_per_facet if domain.d else 1)
        unknown = set(self.batch_sizes) - set(LOSS_TERMS)
        if unknown:
            raise SamplingError(f"batch sizes given for unknown terms {sorted(unknown)}")
        if spec.resample and spec.scheme == "grid":
            logger.warning("resample has no effect with the grid scheme")
        self._fixed = self._draw(0)
        for term, size in self.batch_sizes.items():
            available = self._count(self._fixed, term)
            if available and size > available:
                raise SamplingError(f"batch size {size} for '{term}' exceeds its {available} points")

    def _draw(self, ordinal: int) -> CollocationBatch:
        scheme = self.spec.scheme
        return CollocationBatch(
            interior=sample_interior(self.domain, self.spec.n_interior, scheme, self.seed, ordinal),
            boundary=sample_boundary(self.domain, self.n_per_facet, scheme, self.seed, ordinal)
            if self.with_boundary else None,
            initial=sample_initial(self.domain, self.n_initial, scheme, self.seed, ordinal)
            if self.domain.has_time else None,
            observations=self.observations,
        )

    @staticmethod
    def _count(batch: CollocationBatch, term: str) -> int:
        source = {
            "dynamic": batch.interior,
            "boundary": batch.boundary,
            "initial": batch.initial,
            "observations": batch.observations,
        }[term]
        return 0 if source is None else len(source)

    def _slice(self, batch: CollocationBatch, term: str, step: int) -> Optional[np.ndarray]:
        size = self.batch_sizes.get(term)
        n = self._count(batch, term)
        if size is None or n == 0 or size >= n:
            return None
        per_epoch = -(-n // size)
        epoch, position = divmod(step, per_epoch)
        batches = list(minibatch(np.arange(n), size, self.seed, epoch, key=LOSS_TERMS.index(term)))
        return batches[position]

    def batch(self, step: int) -> CollocationBatch:
        batch = self._draw(step) if self.spec.resample and self.spec.scheme == "uniform" else self._fixed
        interior, boundary, initial, observations = batch.interior, batch.boundary, batch.initial, batch.observations
        index = self._slice(batch, "dynamic", step)
        if index is not None:
            interior = interior[index]
        index = self._slice(batch, "boundary", step)
        if index is not None:
            boundary = boundary.take(index)
        index = self._slice(batch, "initial", step)
        if index is not None:
            initial = initial[index]
        index = self._slice(batch, "observations", step)
        if index is not None:
            observations = observations.take(index)
        out = CollocationBatch(interior, boundary, initial, observations)
        if self.theta_ranges:
            out.theta = self._theta(out, step)
        return out

    def _theta(self, batch: CollocationBatch, step: int) -> dict[str, dict[str, np.ndarray]]:
        samples = {}
        for key, term in enumerate(LOSS_TERMS):
            n = self._count(batch, term)
            if n == 0:
                continue
            rng = generator(self.seed, Stream.THETA, step, key)
            samples[term] = {
                name: rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, float(lo))
                for name, (lo, hi) in sorted(self.theta_ranges.items())
            }
        return samples


def observation_header(has_time: bool, d: int, out_dim: int = 1) -> list[str]:
    return (["t"] if has_time else []) + [f"x{i + 1}" for i in range(d)] + [f"u{j + 1}" for j in range(out_dim)]


def write_observations(path: str | Path, obs: ObservationSet, has_time: bool, d: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(observation_header(has_time, d, obs.values.shape[1]))
        for point, value in zip(obs.points, obs.values):
            writer.writerow([repr(float(v)) for v in (*point, *value)])
    return path


def load_observations(path: str | Path, has_time: bool, d: int, out_dim: Optional[int] = None) -> ObservationSet:
    """Read a ``t?,x1..xd,u1..um`` CSV and check its columns against the problem."""
    path = Path(path)
    if not path.is_file():
        raise SamplingError(f"observation file not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise SamplingError(f"observation file {path} is empty")
    header = [name.strip() for name in rows[0]]
    n_point = (1 if has_time else 0) + d
    m = len(header) - n_point
    if m < 1 or (out_dim is not None and m != out_dim) or header != observation_header(has_time, d, m):
        expected = observation_header(has_time, d, out_dim or 1)
        raise SamplingError(f"observation file {path} has columns {header}, expected {expected}")
    body = [(line, row) for line, row in enumerate(rows[1:], start=2) if row]
    for line, row in body:
        if len(row) != len(header):
            raise SamplingError(
                f"observation file {path} line {line} has {len(row)} fields, expected {len(header)}"
            )
    try:
        data = np.array([[float(v) for v in row] for _, row in body], dtype=np.float64)
    except ValueError as e:
        raise SamplingError(f"observation file {path} holds a non-numeric value: {e}") from e
    if data.size == 0:
        raise SamplingError(f"observation file {path} has no rows")
    return ObservationSet(data[:, :n_point], data[:, n_point:], source=f"file:{path.name}")
