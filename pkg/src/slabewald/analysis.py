"""Trajectory post-processing and statistical comparison tools.

Everything here is a pure function over immutable frame arrays:

* density profiles along the confined axis (``concentration_profile``),
* mean-squared displacement and velocity autocorrelation with
  multiple-time-origin averaging (``msd``, ``vacf``),
* the one-dimensional Wasserstein-2 distance between sample sets
  (``w2_distance``), used to compare energy or profile distributions
  between stochastic and deterministic runs,
* the strong-scaling efficiency curve (``strong_scaling``),
* CSV emission with full float precision (``write_csv``).

Frames are expected to carry xy coordinates *unwrapped* (as produced by
the run loop) so that in-plane displacements are physical; z is confined
and never wrapped or unwrapped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import SlabGeometry, ValidationError

__all__ = [
    "Histogram1D",
    "ScalingRecord",
    "concentration_profile",
    "energy_histogram",
    "msd",
    "strong_scaling",
    "vacf",
    "w2_distance",
    "write_csv",
]

_AXES = {"x": (0,), "y": (1,), "z": (2,), "all": (0, 1, 2)}


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Histogram1D:
    """A 1D histogram on uniform bins.

    ``counts`` holds the bin contents in the units implied by
    ``normalization``:

    * ``"probability"`` — contents sum to one (or to zero for an empty
      histogram),
    * ``"density"`` — contents are per-unit-length (or per-volume)
      densities; no sum constraint is imposed because physical number
      densities integrate to a particle count, not to one.
    """

    edges: np.ndarray
    counts: np.ndarray
    normalization: str = "probability"

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=float)
        counts = np.asarray(self.counts, dtype=float)
        if edges.ndim != 1 or edges.size < 2:
            raise ValidationError("need at least two bin edges")
        widths = np.diff(edges)
        if not np.all(widths > 0):
            raise ValidationError("bin edges must increase")
        if not np.allclose(widths, widths[0], rtol=1e-9, atol=0):
            raise ValidationError("bins must be uniform")
        if counts.shape != (edges.size - 1,):
            raise ValidationError(
                f"counts shape {counts.shape} does not match "
                f"{edges.size - 1} bins")
        if np.any(counts < 0):
            raise ValidationError("bin contents must be >= 0")
        if self.normalization not in ("probability", "density"):
            raise ValidationError(
                f"unknown normalization {self.normalization!r}")
        if self.normalization == "probability":
            total = counts.sum()
            if total > 0 and abs(total - 1.0) > 1e-9:
                raise ValidationError(
                    f"probability contents must sum to 1, got {total}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def is_empty(self) -> bool:
        return bool(self.counts.sum() == 0)

    @classmethod
    def from_samples(cls, samples: np.ndarray, bins: int,
                     range_: Optional[tuple[float, float]] = None,
                     normalization: str = "probability") -> "Histogram1D":
        samples = np.asarray(samples, dtype=float).ravel()
        counts, edges = np.histogram(samples, bins=bins, range=range_)
        counts = counts.astype(float)
        total = counts.sum()
        if total > 0:
            if normalization == "probability":
                counts /= total
            elif normalization == "density":
                counts /= total * np.diff(edges)
        return cls(edges, counts, normalization)


def energy_histogram(frames: Sequence, bins: int = 40,
                     normalization: str = "probability") -> Histogram1D:
    """Histogram of per-frame total potential energy."""
    if not frames:
        raise ValidationError("need at least one frame")
    u = np.array([f.energy.total for f in frames])
    return Histogram1D.from_samples(u, bins, normalization=normalization)


def concentration_profile(frames: Sequence, geometry: SlabGeometry,
                          species: Optional[np.ndarray] = None,
                          bins: int = 50) -> Histogram1D:
    """Time-averaged number density of the selected particles along z.

    ``species`` selects particles by boolean mask or integer index over
    the particle axis (None keeps everybody).  Bin contents are
    number densities: counts divided by frame count and bin volume
    lx * ly * dz, so integrating the profile over the slab returns the
    selected particle count.  An empty selection gives a zero profile.
    """
    if not frames:
        raise ValidationError("need at least one frame")
    z_samples = []
    for frame in frames:
        z = frame.positions[:, 2]
        if species is not None:
            z = z[species]
        z_samples.append(z)
    z_all = np.concatenate(z_samples) if z_samples else np.empty(0)
    counts, edges = np.histogram(z_all, bins=bins, range=(0.0, geometry.h))
    dz = edges[1] - edges[0]
    volume_per_bin = geometry.lx * geometry.ly * dz
    density = counts / (len(frames) * volume_per_bin)
    return Histogram1D(edges, density, "density")


# ---------------------------------------------------------------------------
# time-correlation estimators
# ---------------------------------------------------------------------------

def _frame_spacing(frames: Sequence) -> float:
    times = np.array([f.time for f in frames])
    gaps = np.diff(times)
    if not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-15):
        raise ValidationError("frames must be evenly spaced in time")
    return float(gaps[0])


def msd(frames: Sequence, axis: str = "all") -> tuple[np.ndarray, np.ndarray]:
    """Mean-squared displacement vs lag time.

    Averages over all particles and all time origins (every stored frame
    serves as an origin, so the origin stride equals the sampling
    interval).  Requires the unwrapped coordinates the run loop stores;
    z is physical in the slab and needs no unwrapping.  Returns
    ``(lag_times, msd_values)``; fewer than two frames give empty arrays.
    """
    if axis not in _AXES:
        raise ValidationError(f"axis must be one of {sorted(_AXES)}")
    if len(frames) < 2:
        return np.empty(0), np.empty(0)
    cols = list(_AXES[axis])
    traj = np.stack([f.positions[:, cols] for f in frames])  # (F, N, a)
    dt_frame = _frame_spacing(frames)
    n_frames = traj.shape[0]
    lags = np.arange(n_frames)
    values = np.empty(n_frames)
    values[0] = 0.0
    for lag in range(1, n_frames):
        disp = traj[lag:] - traj[:-lag]
        values[lag] = float(np.mean(np.sum(disp**2, axis=-1)))
    return lags * dt_frame, values


def vacf(frames: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Velocity autocorrelation vs lag time, normalized to 1 at zero lag.

    C(tau) = <v(t) . v(t+tau)> averaged over particles and time origins,
    divided by C(0).  Returns ``(lag_times, correlations)``; fewer than
    two frames give empty arrays.
    """
    if len(frames) < 2:
        return np.empty(0), np.empty(0)
    vel = np.stack([f.velocities for f in frames])  # (F, N, 3)
    dt_frame = _frame_spacing(frames)
    n_frames = vel.shape[0]
    values = np.empty(n_frames)
    values[0] = float(np.mean(np.sum(vel * vel, axis=-1)))
    if values[0] == 0.0:
        raise ValidationError("zero velocities: correlation is undefined")
    for lag in range(1, n_frames):
        values[lag] = float(np.mean(np.sum(vel[lag:] * vel[:-lag], axis=-1)))
    return np.arange(n_frames) * dt_frame, values / values[0]


# ---------------------------------------------------------------------------
# distribution distance
# ---------------------------------------------------------------------------

def w2_distance(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """Wasserstein-2 distance between two 1D empirical distributions.

    Uses the inverse-CDF representation, exact in one dimension:
    W2^2 = integral over q in (0,1) of (Qa(q) - Qb(q))^2 dq with Q the
    empirical quantile function.  For equal sample counts this is the
    root-mean-square difference of the sorted samples; for unequal
    counts the two step quantile functions are compared on the merged
    probability grid, which evaluates the integral exactly.
    """
    a = np.sort(np.asarray(samples_a, dtype=float).ravel())
    b = np.sort(np.asarray(samples_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValidationError("both sample sets must be nonempty")
    if a.size == b.size:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    # merged breakpoints of the two step quantile functions
    grid = np.union1d(np.arange(1, a.size + 1) / a.size,
                      np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate(([0.0], grid)))
    # quantile value on (q_{k-1}, q_k] is the ceil(q*n)-th order statistic
    qa = a[np.ceil(grid * a.size - 1e-12).astype(int) - 1]
    qb = b[np.ceil(grid * b.size - 1e-12).astype(int) - 1]
    return float(np.sqrt(np.sum(widths * (qa - qb) ** 2)))


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingRecord:
    """Wall-time measurements of one job at several worker counts."""

    n_cpus: tuple[int, ...]
    times: tuple[float, ...]
    baseline_n: Optional[int] = None
    baseline_time: Optional[float] = None

    def __post_init__(self) -> None:
        if len(self.n_cpus) != len(self.times):
            raise ValidationError("n_cpus and times must pair up")
        if len(self.n_cpus) == 0:
            raise ValidationError("need at least one measurement")
        if any(n < 1 for n in self.n_cpus):
            raise ValidationError("worker counts must be >= 1")
        if any(t <= 0 for t in self.times):
            raise ValidationError("wall times must be > 0")
        if (self.baseline_n is None) != (self.baseline_time is None):
            raise ValidationError("baseline needs both N_min and T_min")
        if self.baseline_time is not None and self.baseline_time <= 0:
            raise ValidationError("baseline time must be > 0")

    @classmethod
    def with_baseline_from_smallest(cls, n_cpus: Sequence[int],
                                    times: Sequence[float]) -> "ScalingRecord":
        order = int(np.argmin(n_cpus))
        return cls(tuple(n_cpus), tuple(times),
                   baseline_n=int(n_cpus[order]),
                   baseline_time=float(times[order]))


def strong_scaling(record: ScalingRecord) -> tuple[np.ndarray, np.ndarray]:
    """Parallel efficiency eta(N_cpu) = (N_min/N_cpu) * (T_min/T(N_cpu))."""
    if record.baseline_n is None:
        raise ValidationError("scaling record has no baseline entry")
    n = np.array(record.n_cpus, dtype=float)
    t = np.array(record.times, dtype=float)
    eta = (record.baseline_n / n) * (record.baseline_time / t)
    return np.array(record.n_cpus), eta


# ---------------------------------------------------------------------------
# table output
# ---------------------------------------------------------------------------

def write_csv(path, names: Sequence[str],
              columns: Sequence[np.ndarray]) -> None:
    """Write named columns as CSV: one header row, floats at 17
    significant digits in scientific notation."""
    if len(names) != len(columns):
        raise ValidationError("one name per column required")
    arrays = [np.asarray(c) for c in columns]
    if arrays and any(a.shape != arrays[0].shape for a in arrays):
        raise ValidationError("columns must share a length")

    def fmt(value):
        if isinstance(value, (np.floating, float)):
            return f"{value:.16e}"
        return str(value)

    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for row in zip(*arrays):
            writer.writerow([fmt(v) for v in row])
