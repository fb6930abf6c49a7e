"""Seeded ensembles of independent one-dimensional Brownian paths.

Every increment is drawn from a Philox stream whose key is
``(seed, sample, mode)``; the stream position is the node index. Refinement
levels use a disjoint block of the Philox counter, so bridge samples are keyed
on ``(seed, sample, mode, depth)``. Paths can therefore be generated in any
order, in chunks, or on any number of workers with bit-identical results.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._parallel import ordered_map

MASK64 = (1 << 64) - 1
MAGIC = b"KFBM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQIIIdd")


class DomainError(ValueError):
    """Raised for invalid grid or ensemble sizes."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if not (self.t0 < self.t1):
            raise DomainError(f"need t0 < t1, got [{self.t0}, {self.t1}]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise DomainError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + np.arange(self.steps + 1) * self.dt

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Node index of time ``t``; raises if ``t`` is not (close to) a node."""
        x = (t - self.t0) / self.dt
        k = int(round(x))
        if abs(x - k) > tol * max(1.0, abs(x)) or k < 0 or k > self.steps:
            raise DomainError(f"time {t} is not a node of {self}")
        return k

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.t1, self.steps * factor)


def _stream(seed: int, sample: int, mode: int, depth: int) -> np.random.Generator:
    # key: (seed, sample<<32 | mode); counter word 3 separates refinement depths
    key = np.array([seed & MASK64, ((sample & 0xFFFFFFFF) << 32) | (mode & 0xFFFFFFFF)],
                   dtype=np.uint64)
    counter = np.array([0, 0, 0, depth], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass(frozen=True)
class BrownianEnsemble:
    """Brownian paths ``values[sample, mode, node]`` on a uniform grid.

    ``first_sample`` is the global index of row 0, so an ensemble generated in
    chunks equals the corresponding rows of a single large ensemble.
    ``depth`` counts bisection levels applied by :func:`refine`.
    """

    grid: TimeGrid
    modes: int
    samples: int
    values: np.ndarray
    seed: int
    first_sample: int = 0
    depth: int = 0
    _frozen: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self.values.shape != (self.samples, self.modes, self.grid.steps + 1):
            raise DomainError(f"values shape {self.values.shape} does not match ensemble")
        self.values.flags.writeable = False

    @property
    def sample_ids(self) -> np.ndarray:
        return self.first_sample + np.arange(self.samples)

    def row(self, sample: int) -> int:
        """Local row of global sample index ``sample``."""
        r = sample - self.first_sample
        if not 0 <= r < self.samples:
            raise IndexError(f"sample {sample} not in ensemble "
                             f"[{self.first_sample}, {self.first_sample + self.samples})")
        return r

    def path(self, sample: int, mode: int = 0) -> np.ndarray:
        return self.values[self.row(sample), mode]

    def at(self, t: float) -> np.ndarray:
        """Values at node time ``t``, shape (samples, modes)."""
        return self.values[:, :, self.grid.index_of(t)]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=2)

    def __eq__(self, other):
        if not isinstance(other, BrownianEnsemble):
            return NotImplemented
        return (self.grid == other.grid and self.modes == other.modes
                and self.samples == other.samples and self.seed == other.seed
                and self.first_sample == other.first_sample
                and np.array_equal(self.values, other.values))

    __hash__ = None


def _generate_rows(seed, grid, modes, sample):
    sd = np.sqrt(grid.dt)
    out = np.empty((modes, grid.steps + 1))
    out[:, 0] = 0.0
    for k in range(modes):
        z = _stream(seed, sample, k, 0).standard_normal(grid.steps)
        np.cumsum(z * sd, out=out[k, 1:])
    return out


def generate(seed: int, grid: TimeGrid, modes: int, samples: int, *,
             first_sample: int = 0, workers: int | None = None) -> BrownianEnsemble:
    """Generate ``samples`` independent ``modes``-dimensional Brownian paths."""
    if int(modes) != modes or modes < 1:
        raise DomainError(f"modes must be >= 1, got {modes}")
    if int(samples) != samples or samples < 1:
        raise DomainError(f"samples must be >= 1, got {samples}")
    if first_sample < 0:
        raise DomainError("first_sample must be nonnegative")
    rows = ordered_map(lambda n: _generate_rows(seed, grid, modes, n),
                       range(first_sample, first_sample + samples), workers)
    values = np.stack(rows) if rows else np.empty((0, modes, grid.steps + 1))
    return BrownianEnsemble(grid, modes, samples, values, seed, first_sample)


def _bisect_rows(seed, depth, sample, vals, dt):
    # vals: (modes, n+1) on grid with spacing dt -> (modes, 2n+1)
    modes, n1 = vals.shape
    out = np.empty((modes, 2 * n1 - 1))
    out[:, ::2] = vals
    sd = 0.5 * np.sqrt(dt)
    for k in range(modes):
        z = _stream(seed, sample, k, depth + 1).standard_normal(n1 - 1)
        out[k, 1::2] = 0.5 * (vals[k, :-1] + vals[k, 1:]) + sd * z
    return out


def _bridge_rows(seed, depth, sample, vals, dt, factor):
    # general factor: sequential bridge sampling inside each coarse interval
    modes, n1 = vals.shape
    n = n1 - 1
    out = np.empty((modes, n * factor + 1))
    out[:, ::factor] = vals
    delta = dt / factor
    for k in range(modes):
        z = _stream(seed, sample, k, depth + 1).standard_normal((factor - 1, n))
        prev = vals[k, :-1]
        right = vals[k, 1:]
        for j in range(1, factor):
            remaining = dt - (j - 1) * delta
            mean = prev + (right - prev) * (delta / remaining)
            var = delta * (remaining - delta) / remaining
            prev = mean + np.sqrt(var) * z[j - 1]
            out[k, j::factor] = prev
    return out


def refine(ens: BrownianEnsemble, factor: int, *, workers: int | None = None) -> BrownianEnsemble:
    """Refine the grid by ``factor`` with Brownian-bridge interior samples.

    Powers of two are applied as repeated midpoint bisections, one depth level
    each, so ``refine(refine(e, 2), 2) == refine(e, 4)``. Other factors consume
    one depth level with sequential bridge sampling.
    """
    if int(factor) != factor or factor < 2:
        raise DomainError(f"refinement factor must be an integer >= 2, got {factor}")
    if factor & (factor - 1) == 0:
        out = ens
        for _ in range(factor.bit_length() - 1):
            out = _refine_once(out, 2, workers)
        return out
    return _refine_once(ens, factor, workers)


def _refine_once(ens, factor, workers):
    dt = ens.grid.dt
    if factor == 2:
        fn = lambda r: _bisect_rows(ens.seed, ens.depth, ens.first_sample + r, ens.values[r], dt)
    else:
        fn = lambda r: _bridge_rows(ens.seed, ens.depth, ens.first_sample + r, ens.values[r], dt, factor)
    rows = ordered_map(fn, range(ens.samples), workers)
    return BrownianEnsemble(ens.grid.refined(factor), ens.modes, ens.samples, np.stack(rows),
                            ens.seed, ens.first_sample, ens.depth + 1)


def to_bytes(ens: BrownianEnsemble) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, ens.seed & MASK64, ens.modes, ens.samples,
                          ens.grid.steps, ens.grid.t0, ens.grid.t1)
    return header + np.ascontiguousarray(ens.values, dtype="<f8").tobytes()


def from_bytes(data: bytes) -> BrownianEnsemble:
    if len(data) < _HEADER.size:
        raise ValueError("truncated ensemble header")
    magic, version, seed, modes, samples, steps, t0, t1 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported ensemble format version {version}")
    count = samples * modes * (steps + 1)
    body = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size)
    values = body.reshape(samples, modes, steps + 1).astype(np.float64)
    return BrownianEnsemble(TimeGrid(t0, t1, steps), modes, samples, values, seed)


def save(ens: BrownianEnsemble, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ens))


def load(path: str | Path) -> BrownianEnsemble:
    return from_bytes(Path(path).read_bytes())
