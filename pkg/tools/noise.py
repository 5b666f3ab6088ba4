"""
tools/noise.py
Driving noises on a uniform grid: truncated cylindrical Wiener increments,
observation-channel Brownian increments and finite-mark Poisson jumps.

Every path draws from counter-based Philox streams keyed by
(seed, path_index, stream_tag), so an ensemble is a pure function of its
seed regardless of how it is generated or split.
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from tools.errors import InvalidArgument, ShapeError, require

logger = logging.getLogger(__name__)

STREAM_W = 0
STREAM_B = 1
STREAM_N = 2

DUMP_MAGIC = b"SPDN"
DUMP_VERSION = 1


def stream(seed: int, path_index: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path_index, tag])))


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self):
        require(self.T > 0, f"horizon T must be positive, got {self.T}")
        require(self.n_steps >= 1, f"n_steps must be at least 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def cell_of(self, t) -> np.ndarray:
        """Index k of the cell (t_k, t_{k+1}] containing t."""
        k = np.ceil((np.asarray(t, dtype=float) - self.t0) / self.dt).astype(int) - 1
        return np.clip(k, 0, self.n_steps - 1)


@dataclass(frozen=True)
class JumpMeasureSpec:
    marks: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "marks", tuple(float(a) for a in self.marks))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        require(len(self.marks) == len(self.weights),
                f"{len(self.marks)} marks but {len(self.weights)} weights")
        require(all(w > 0 for w in self.weights), "mark intensities must be positive")

    @property
    def K(self) -> int:
        return len(self.marks)

    @property
    def rates(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def total_intensity(self) -> float:
        return float(sum(self.weights))

    # Mark integrals of drivers and running costs. With no marks the integral
    # runs against a single unit-mass null mark that never fires.
    @property
    def integration_weights(self) -> np.ndarray:
        return self.rates if self.K else np.ones(1)

    @property
    def integration_marks(self) -> np.ndarray:
        return np.asarray(self.marks, dtype=float) if self.K else np.zeros(1)

    @property
    def n_quadrature(self) -> int:
        return max(self.K, 1)


@dataclass(frozen=True)
class NoiseGrid:
    grid: TimeGrid
    jm: JumpMeasureSpec
    dW: np.ndarray = field(repr=False)            # (n_steps, n_W)
    dB: np.ndarray = field(repr=False)            # (n_steps, d)
    jump_times: np.ndarray = field(repr=False)    # (J,) strictly increasing in (0, T]
    jump_marks: np.ndarray = field(repr=False)    # (J,) mark indices
    seed: int = 0
    path_index: int = 0

    def __post_init__(self):
        for name in ("dW", "dB", "jump_times", "jump_marks"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.dW.shape[0] != self.grid.n_steps or self.dB.shape[0] != self.grid.n_steps:
            raise ShapeError("increment arrays must have one row per grid cell")

    @property
    def n_W(self) -> int:
        return self.dW.shape[1]

    @property
    def d(self) -> int:
        return self.dB.shape[1]

    def counts(self) -> np.ndarray:
        """Jump counts per (cell, mark), shape (n_steps, K)."""
        out = np.zeros((self.grid.n_steps, self.jm.K), dtype=np.int64)
        if self.jump_times.size:
            np.add.at(out, (self.grid.cell_of(self.jump_times), self.jump_marks), 1)
        return out


def sample_noise(grid: TimeGrid, n_W: int, d: int, jm: JumpMeasureSpec,
                 seed: int, path_index: int) -> NoiseGrid:
    require(n_W >= 1, f"n_W must be at least 1, got {n_W}")
    require(d >= 1, f"d must be at least 1, got {d}")
    sq = np.sqrt(grid.dt)
    dW = stream(seed, path_index, STREAM_W).standard_normal((grid.n_steps, n_W)) * sq
    dB = stream(seed, path_index, STREAM_B).standard_normal((grid.n_steps, d)) * sq

    times = np.empty(0)
    marks = np.empty(0, dtype=np.int64)
    lam = jm.total_intensity
    if lam > 0:
        rng = stream(seed, path_index, STREAM_N)
        count = rng.poisson(lam * grid.T)
        # T - U lies in (0, T]
        times = np.sort(grid.t0 + grid.T - rng.uniform(0.0, grid.T, size=count))
        marks = rng.choice(jm.K, size=count, p=jm.rates / lam).astype(np.int64)
    return NoiseGrid(grid=grid, jm=jm, dW=dW, dB=dB, jump_times=times, jump_marks=marks,
                     seed=seed, path_index=path_index)


# ------------------------------------------------------------------ #
#  Single-grid perturbations                                         #
# ------------------------------------------------------------------ #

class PerturbationKind(str, Enum):
    GAUSSIAN_W = "gaussian_W"
    GAUSSIAN_B = "gaussian_B"
    ADD_JUMP = "add_jump"


@dataclass(frozen=True)
class NoisePerturbation:
    kind: PerturbationKind
    step: int = 0
    index: int = 0
    bump: float = 0.0
    time: float = 0.0

    def __post_init__(self):
        if self.kind != PerturbationKind.ADD_JUMP and self.bump == 0.0:
            raise InvalidArgument("Gaussian perturbations need a non-zero bump")

    @classmethod
    def gaussian_W(cls, step: int, mode: int, bump: float) -> "NoisePerturbation":
        return cls(PerturbationKind.GAUSSIAN_W, step=step, index=mode, bump=bump)

    @classmethod
    def gaussian_B(cls, step: int, comp: int, bump: float) -> "NoisePerturbation":
        return cls(PerturbationKind.GAUSSIAN_B, step=step, index=comp, bump=bump)

    @classmethod
    def add_jump(cls, time: float, mark_index: int) -> "NoisePerturbation":
        return cls(PerturbationKind.ADD_JUMP, index=mark_index, time=time)


def apply_perturbation(ng: NoiseGrid, p: NoisePerturbation) -> NoiseGrid:
    n = ng.grid.n_steps
    if p.kind == PerturbationKind.ADD_JUMP:
        if not (ng.grid.t0 < p.time <= ng.grid.t0 + ng.grid.T):
            raise InvalidArgument(f"jump time {p.time} outside (t0, T]")
        if not 0 <= p.index < ng.jm.K:
            raise InvalidArgument(f"mark index {p.index} out of range for K={ng.jm.K}")
        # jump times stay strictly increasing
        if np.any(ng.jump_times == p.time):
            raise InvalidArgument(f"a jump already occurs at time {p.time}")
        pos =int(np.searchsorted(ng.jump_times, p.time, side="right"))
        times = np.insert(ng.jump_times, pos, p.time)
        marks = np.insert(ng.jump_marks, pos, p.index)
        return replace(ng, jump_times=times, jump_marks=marks)

    target = "dW" if p.kind == PerturbationKind.GAUSSIAN_W else "dB"
    arr = np.array(getattr(ng, target))
    if not (0 <= p.step < n and 0 <= p.index < arr.shape[1]):
        raise InvalidArgument(f"slot ({p.step}, {p.index}) out of range for {target} {arr.shape}")
    arr[p.step, p.index] += p.bump
    return replace(ng, **{target: arr})


def girsanov_shift(ng: NoiseGrid, h_path: np.ndarray) -> NoiseGrid:
    """dB'_k = dB_k + h_k dt: B-increments to Y-increments (negate h for the inverse)."""
    h_path = np.asarray(h_path, dtype=float)
    if h_path.shape != ng.dB.shape:
        raise ShapeError(f"drift path shape {h_path.shape} does not match dB {ng.dB.shape}")
    return replace(ng, dB=ng.dB + h_path * ng.grid.dt)


# ================================================================== #
#  Ensembles                                                         #
# ================================================================== #

@dataclass(frozen=True)
class NoiseBatch:
    """M paths stacked on a leading axis; jumps carried as per-cell counts."""
    grid: TimeGrid
    jm: JumpMeasureSpec
    dW: np.ndarray = field(repr=False)        # (M, n_steps, n_W)
    dB: np.ndarray = field(repr=False)        # (M, n_steps, d)
    counts: np.ndarray = field(repr=False)    # (M, n_steps, K)
    seed: int = 0
    path_indices: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        M = self.dW.shape[0]
        if self.dB.shape[:2] != self.dW.shape[:2] or self.counts.shape[:2] != self.dW.shape[:2]:
            raise ShapeError("dW, dB and counts must share (M, n_steps)")
        if self.counts.shape[2] != self.jm.K:
            raise ShapeError(f"counts carry {self.counts.shape[2]} marks, jump measure has {self.jm.K}")
        if self.path_indices is None:
            object.__setattr__(self, "path_indices", np.arange(M, dtype=np.int64))

    @property
    def M(self) -> int:
        return self.dW.shape[0]

    @property
    def n_W(self) -> int:
        return self.dW.shape[2]

    @property
    def d(self) -> int:
        return self.dB.shape[2]

    @property
    def compensated(self) -> np.ndarray:
        return self.counts - self.jm.rates * self.grid.dt

    @classmethod
    def from_grids(cls, grids: Sequence[NoiseGrid]) -> "NoiseBatch":
        require(len(grids) > 0, "need at least one noise grid")
        first = grids[0]
        return cls(grid=first.grid, jm=first.jm,
                   dW=np.stack([g.dW for g in grids]),
                   dB=np.stack([g.dB for g in grids]),
                   counts=np.stack([g.counts() for g in grids]),
                   seed=first.seed,
                   path_indices=np.array([g.path_index for g in grids], dtype=np.int64))

    def path(self, m: int) -> NoiseGrid:
        """Single-path view; jump times are placed at cell midpoints."""
        k_idx, mark_idx = np.nonzero(self.counts[m])
        reps = self.counts[m][k_idx, mark_idx]
        times = np.repeat((k_idx + 0.5) * self.grid.dt + self.grid.t0, reps)
        marks = np.repeat(mark_idx, reps)
        return NoiseGrid(grid=self.grid, jm=self.jm, dW=self.dW[m], dB=self.dB[m],
                         jump_times=times, jump_marks=marks, seed=self.seed,
                         path_index=int(self.path_indices[m]))

    def subset(self, rows) -> "NoiseBatch":
        return replace(self, dW=self.dW[rows], dB=self.dB[rows], counts=self.counts[rows],
                       path_indices=self.path_indices[rows])

    # Batch perturbations used by the Malliavin operators. Each returns a copy.
    def bump_W(self, step: int, mode: int, h: float) -> "NoiseBatch":
        dW = self.dW.copy()
        dW[:, step, mode] += h
        return replace(self, dW=dW)

    def bump_B(self, step: int, comp: int, h: float) -> "NoiseBatch":
        dB = self.dB.copy()
        dB[:, step, comp] += h
        return replace(self, dB=dB)

    def shift(self, dW: Optional[np.ndarray] = None, dB: Optional[np.ndarray] = None) -> "NoiseBatch":
        return replace(self,
                       dW=self.dW if dW is None else self.dW + dW,
                       dB=self.dB if dB is None else self.dB + dB)

    def add_jump(self, step: int, mark: int) -> "NoiseBatch":
        counts = self.counts.copy()
        counts[:, step, mark] += 1
        return replace(self, counts=counts)


def sample_batch(grid: TimeGrid, n_W: int, d: int, jm: JumpMeasureSpec, seed: int,
                 M: int, first_index: int = 0) -> NoiseBatch:
    require(M >= 1, f"ensemble size must be at least 1, got {M}")
    grids = [sample_noise(grid, n_W, d, jm, seed, first_index + m) for m in range(M)]
    logger.debug("sampled %d noise paths (seed=%d, n_W=%d, d=%d, K=%d)", M, seed, n_W, d, jm.K)
    return NoiseBatch.from_grids(grids)


# ------------------------------------------------------------------ #
#  Binary replay files                                               #
# ------------------------------------------------------------------ #

_HEADER = struct.Struct("<4sI5QdQ")


def write_noise_dump(batch: NoiseBatch, path: str | Path) -> Path:
    """Versioned little-endian dump: header, path indices, marks, rates, dW, dB, counts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    M, n, n_W = batch.dW.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, M, n, n_W, batch.d, batch.jm.K,
                              batch.grid.T, batch.seed))
        fh.write(batch.path_indices.astype("<u8").tobytes())
        fh.write(np.asarray(batch.jm.marks, dtype="<f8").tobytes())
        fh.write(batch.jm.rates.astype("<f8").tobytes())
        for arr in (batch.dW, batch.dB, batch.counts):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    logger.info("wrote noise dump %s (%d paths)", path, M)
    return path


def read_noise_dump(path: str | Path) -> NoiseBatch:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidArgument(f"{path}: truncated noise dump")
    magic, version, M, n, n_W, d, K, T, seed = _HEADER.unpack_from(raw, 0)
    if magic != DUMP_MAGIC:
        raise InvalidArgument(f"{path}: not a noise dump (magic {magic!r})")
    if version != DUMP_VERSION:
        raise InvalidArgument(f"{path}: unsupported dump version {version}")

    offset = _HEADER.size

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal offset
        width = np.dtype(dtype).itemsize
        if offset + count * width > len(raw):
            raise InvalidArgument(f"{path}: truncated noise dump")
        out = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += count * width
        return out

    indices = take(M, "<u8").astype(np.int64)
    marks = take(K, "<f8")
    rates = take(K, "<f8")
    dW = take(M * n * n_W, "<f8").reshape(M, n, n_W).copy()
    dB = take(M * n * d, "<f8").reshape(M, n, d).copy()
    counts = take(M * n * K, "<f8").reshape(M, n, K).astype(np.int64)
    return NoiseBatch(grid=TimeGrid(T=T, n_steps=n), jm=JumpMeasureSpec(tuple(marks), tuple(rates)),
                      dW=dW, dB=dB, counts=counts, seed=seed, path_indices=indices)
