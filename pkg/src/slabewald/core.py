"""Shared geometry, particle-system, and parameter types.

Conventions used throughout the package:

* The simulation cell is periodic in x and y (lengths ``lx``, ``ly``) and
  confined in z: all physical charges live strictly inside ``0 < z < h``.
  An artificial z-period ``lz >= h`` exists only inside the 3D-periodic
  reciprocal-space reformulation and is never a physical boundary.
* Charges are in units of the elementary charge; electrostatic energies are
  returned with a unit Coulomb prefactor (``U = sum q_i q_j / r``).  Callers
  that work in reduced LJ units multiply by a coupling constant
  (Bjerrum length x kT).
* A dielectric mismatch at z = 0 and z = h is handled by image charges.
  With contrasts ``gamma_bottom = (eps_c - eps_bottom)/(eps_c + eps_bottom)``
  and ``gamma_top`` analogous, the level-l images of a source at z are

      z_plus(l)  = (-1)^l z + 2*ceil(l/2)*h     (stack above the slab)
      z_minus(l) = (-1)^l z - 2*floor(l/2)*h    (stack below the slab)

  carrying products of the two contrasts that depend on the reflection
  convention (see :class:`ImageConvention`).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class StabilityError(RuntimeError):
    """Raised when parameters enter a regime where the method breaks down."""


class SingularityError(ValidationError):
    """Raised when coincident charges put a 1/r singularity in a sum."""


class EscapeError(RuntimeError):
    """Raised when a particle leaves the slab beyond the wall range.

    Signals integrator misconfiguration (time step too large, forces wrong)
    rather than a recoverable condition: escaping charges invalidate the
    image construction, so the run is surfaced loudly instead of reflected.
    """


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlabGeometry:
    """Doubly periodic box: periodic in x/y, confined to ``0 < z < h``.

    Parameters
    ----------
    lx, ly : float
        Periodic box lengths.
    h : float
        Confinement height; physical charges satisfy ``0 < z < h``.
    lz : float, optional
        Artificial period used by the 3D-periodic reciprocal reformulation.
        ``None`` until chosen (see ``fourier.choose_lz``).
    """

    lx: float
    ly: float
    h: float
    lz: float | None = None

    def __post_init__(self) -> None:
        for name in ("lx", "ly", "h"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be positive and finite, got {v!r}")
        if self.lz is not None and not (np.isfinite(self.lz) and self.lz > self.h):
            raise ValidationError(
                f"lz must exceed the confinement height h={self.h}, got {self.lz!r}"
            )

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @property
    def volume(self) -> float:
        """Volume of the artificial 3D-periodic cell (requires ``lz``)."""
        if self.lz is None:
            raise ValidationError("lz has not been chosen for this geometry")
        return self.lx * self.ly * self.lz

    @property
    def lmax(self) -> float:
        """Larger of the two periodic box lengths."""
        return max(self.lx, self.ly)

    def with_lz(self, lz: float) -> "SlabGeometry":
        return SlabGeometry(self.lx, self.ly, self.h, lz)


def min_image_xy(d: np.ndarray, geometry: SlabGeometry) -> np.ndarray:
    """Wrap the x/y components of displacement vectors to the nearest image.

    The z component is returned untouched: z is not periodic.  Accepts a
    single displacement ``(3,)`` or a batch ``(..., 3)``.
    """
    d = np.asarray(d, dtype=float)
    out = d.copy()
    out[..., 0] -= geometry.lx * np.round(d[..., 0] / geometry.lx)
    out[..., 1] -= geometry.ly * np.round(d[..., 1] / geometry.ly)
    return out


def wrap_xy(positions: np.ndarray, geometry: SlabGeometry) -> np.ndarray:
    """Wrap absolute x/y coordinates into the base cell [0, L)."""
    p = np.array(positions, dtype=float)
    p[..., 0] %= geometry.lx
    p[..., 1] %= geometry.ly
    return p


# ---------------------------------------------------------------------------
# dielectric boundaries and image charges
# ---------------------------------------------------------------------------

class ImageConvention(enum.Enum):
    """Assignment of contrast products to odd image levels.

    The two interface contrasts enter level-l image prefactors as
    ``gamma_top^a * gamma_bottom^b`` with ``{a, b} = {floor(l/2), ceil(l/2)}``.
    For even l the exponents coincide and both conventions agree.  For odd l:

    * ``AS_WRITTEN``: the "+" branch (images stacked above the slab) carries
      ``gamma_top^floor(l/2) * gamma_bottom^ceil(l/2)`` — i.e. the first
      upper image carries the bottom contrast.
    * ``PHYSICAL_MIRROR`` (default): exponents on odd levels are swapped, so
      the first upper image (a reflection through the z = h interface, sitting
      at 2h - z) carries ``gamma_top``, and the first lower image (at -z)
      carries ``gamma_bottom``.  Only this choice is consistent with the
      closed-form single-interface limits and with the geometric-series
      k-space kernel, which the test suite checks term by term.
    """

    AS_WRITTEN = "as-written"
    PHYSICAL_MIRROR = "physical-mirror"


def dielectric_contrast(eps_center: float, eps_outer: float) -> float:
    """Interface contrast (eps_center - eps_outer) / (eps_center + eps_outer)."""
    if eps_center <= 0:
        raise ValidationError(f"eps_center must be positive, got {eps_center!r}")
    if eps_outer < 0:
        raise ValidationError(f"eps_outer must be non-negative, got {eps_outer!r}")
    return (eps_center - eps_outer) / (eps_center + eps_outer)


def image_factor(
    level: int,
    branch: int,
    gamma_top: float,
    gamma_bottom: float,
    convention: ImageConvention = ImageConvention.PHYSICAL_MIRROR,
) -> float:
    """Contrast prefactor of the level-``level`` image on the given branch.

    ``branch`` is +1 for the stack above the slab and -1 for the stack below.
    Level 0 (the source itself) has factor 1.
    """
    if level < 0:
        raise ValidationError(f"image level must be >= 0, got {level}")
    if branch not in (+1, -1):
        raise ValidationError(f"branch must be +1 or -1, got {branch!r}")
    if level == 0:
        return 1.0
    lo, hi = level // 2, (level + 1) // 2
    if convention is ImageConvention.AS_WRITTEN:
        # "+" branch: top^floor, bottom^ceil; "-" branch: top^ceil, bottom^floor
        a, b = (lo, hi) if branch == +1 else (hi, lo)
    else:
        a, b = (hi, lo) if branch == +1 else (lo, hi)
    return gamma_top**a * gamma_bottom**b


def image_position(level: int, branch: int, z, h: float):
    """z-coordinate of the level-``level`` image of a source at height ``z``.

    Even levels translate the source (same z-orientation); odd levels reflect
    it.  The "+" stack lives at z >= h, the "-" stack at z <= 0; images never
    re-enter the open slab (0, h) for sources inside it.
    """
    if level < 0:
        raise ValidationError(f"image level must be >= 0, got {level}")
    if branch not in (+1, -1):
        raise ValidationError(f"branch must be +1 or -1, got {branch!r}")
    z = np.asarray(z, dtype=float)
    sign = -1.0 if level % 2 else 1.0
    if branch == +1:
        offset = 2.0 * ((level + 1) // 2) * h
    else:
        offset = -2.0 * (level // 2) * h
    out = sign * z + offset
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ImageCharge:
    """One image charge: provenance plus its derived factor and height."""

    source: int
    level: int
    branch: int
    factor: float
    z: float


@dataclass(frozen=True)
class DielectricSpec:
    """Three-layer dielectric sandwich: eps_top / eps_center / eps_bottom.

    ``n_levels`` is the truncation order M of the image series (0 disables
    images entirely; required when both contrasts vanish is not enforced,
    zero-contrast images are simply weightless).
    """

    eps_center: float = 1.0
    eps_top: float = 1.0
    eps_bottom: float = 1.0
    n_levels: int = 0
    convention: ImageConvention = ImageConvention.PHYSICAL_MIRROR

    def __post_init__(self) -> None:
        if self.eps_center <= 0:
            raise ValidationError("eps_center must be positive")
        if self.eps_top < 0 or self.eps_bottom < 0:
            raise ValidationError("outer permittivities must be non-negative")
        if not isinstance(self.n_levels, (int, np.integer)) or self.n_levels < 0:
            raise ValidationError(f"n_levels must be a non-negative int, got {self.n_levels!r}")

    @property
    def gamma_top(self) -> float:
        return dielectric_contrast(self.eps_center, self.eps_top)

    @property
    def gamma_bottom(self) -> float:
        return dielectric_contrast(self.eps_center, self.eps_bottom)

    @property
    def is_homogeneous(self) -> bool:
        return self.n_levels == 0 or (self.gamma_top == 0.0 and self.gamma_bottom == 0.0)

    @classmethod
    def homogeneous(cls) -> "DielectricSpec":
        return cls()

    @classmethod
    def symmetric(cls, gamma: float, n_levels: int,
                  convention: ImageConvention = ImageConvention.PHYSICAL_MIRROR,
                  ) -> "DielectricSpec":
        """Spec with equal contrasts gamma on both walls (eps_center = 1)."""
        if not -1.0 <= gamma <= 1.0:
            raise ValidationError(f"contrast must lie in [-1, 1], got {gamma}")
        if gamma == 1.0:
            eps_outer = 0.0
        else:
            eps_outer = (1.0 - gamma) / (1.0 + gamma)
        return cls(1.0, eps_outer, eps_outer, n_levels, convention)


@dataclass(frozen=True)
class ImageSeries:
    """Vector form of the truncated image series for one dielectric spec.

    For each of the 2M (level, branch) entries, an image of a source at
    height z sits at ``sign * z + offset`` with charge ``factor * q``.
    Entries are ordered level-major: (1,+), (1,-), (2,+), (2,-), ...
    """

    levels: np.ndarray   # (2M,) int
    branches: np.ndarray  # (2M,) int, +1/-1
    signs: np.ndarray    # (2M,) float, (-1)^level
    offsets: np.ndarray  # (2M,) float
    factors: np.ndarray  # (2M,) float

    def __len__(self) -> int:
        return len(self.levels)

    def z_images(self, z: np.ndarray) -> np.ndarray:
        """Image heights, shape (2M, N) for source heights ``z`` of shape (N,)."""
        z = np.asarray(z, dtype=float)
        return self.signs[:, None] * z[None, :] + self.offsets[:, None]


def image_series(spec: DielectricSpec, h: float) -> ImageSeries:
    """Tabulate levels 1..M of the image series for slab height ``h``."""
    m = spec.n_levels
    levels = np.repeat(np.arange(1, m + 1), 2)
    branches = np.tile([+1, -1], m)
    gt, gb = spec.gamma_top, spec.gamma_bottom
    signs = np.where(levels % 2 == 1, -1.0, 1.0)
    offsets = np.where(
        branches == +1,
        2.0 * ((levels + 1) // 2) * h,
        -2.0 * (levels // 2) * h,
    ).astype(float)
    factors = np.array(
        [
            image_factor(int(l), int(b), gt, gb, spec.convention)
            for l, b in zip(levels, branches)
        ],
        dtype=float,
    )
    return ImageSeries(levels, branches, signs, offsets, factors)


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------

class ParticleSystem:
    """Charges, masses, and positions inside a slab geometry.

    Positions are wrapped into the base cell in x/y on construction; z must
    lie strictly inside (0, h).  ``species`` is an optional integer label per
    particle used by analysis (default: all zeros).
    """

    def __init__(
        self,
        geometry: SlabGeometry,
        positions: np.ndarray,
        charges: np.ndarray,
        masses: np.ndarray | float = 1.0,
        species: np.ndarray | None = None,
    ) -> None:
        positions = np.array(positions, dtype=float)
        charges = np.asarray(charges, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValidationError(f"positions must have shape (N, 3), got {positions.shape}")
        n = positions.shape[0]
        if charges.shape != (n,):
            raise ValidationError(
                f"charges must have shape ({n},) to match positions, got {charges.shape}"
            )
        if not np.all(np.isfinite(positions)) or not np.all(np.isfinite(charges)):
            raise ValidationError("positions and charges must be finite")
        z = positions[:, 2]
        if np.any(z <= 0.0) or np.any(z >= geometry.h):
            bad = int(np.argmax((z <= 0.0) | (z >= geometry.h)))
            raise ValidationError(
                f"particle {bad} has z={z[bad]!r} outside the open slab (0, {geometry.h})"
            )
        masses = np.broadcast_to(np.asarray(masses, dtype=float), (n,)).copy()
        if np.any(masses <= 0) or not np.all(np.isfinite(masses)):
            raise ValidationError("masses must be positive and finite")
        if species is None:
            species = np.zeros(n, dtype=int)
        else:
            species = np.asarray(species, dtype=int)
            if species.shape != (n,):
                raise ValidationError(f"species must have shape ({n},), got {species.shape}")

        self.geometry = geometry
        self.positions = wrap_xy(positions, geometry)
        self.charges = charges.copy()
        self.masses = masses
        self.species = species.copy()

    @property
    def n(self) -> int:
        return len(self.charges)

    @property
    def net_charge(self) -> float:
        return float(np.sum(self.charges))

    def require_neutral(self, tol: float = 1e-9) -> None:
        """Raise unless the total charge vanishes (k-space sums need this)."""
        scale = float(np.sum(np.abs(self.charges))) or 1.0
        if abs(self.net_charge) > tol * scale:
            raise ValidationError(
                f"system is not charge-neutral: net charge {self.net_charge:g}"
            )

    def with_positions(self, positions: np.ndarray) -> "ParticleSystem":
        """Copy of this system at new positions (same charges/masses/species)."""
        return ParticleSystem(self.geometry, positions, self.charges, self.masses, self.species)

    def copy(self) -> "ParticleSystem":
        return self.with_positions(self.positions)


# ---------------------------------------------------------------------------
# splitting parameters and randomness
# ---------------------------------------------------------------------------

def default_alpha(n: int, geometry: SlabGeometry, multiplier: float = 1.0) -> float:
    """Ewald splitting parameter scaling rule alpha ~ N^(1/3) / (lx ly h)^(1/3).

    Balances the O(N) real-space work at fixed cutoff against the k-space
    mode count so the total cost stays linear in N at fixed density.
    """
    if n <= 0:
        raise ValidationError("n must be positive")
    return multiplier * n ** (1.0 / 3.0) / (geometry.lx * geometry.ly * geometry.h) ** (1.0 / 3.0)


def suggest_kmax(alpha: float, tolerance: float) -> float:
    """Reciprocal cutoff k_max with mode weight e^(-k^2/4a^2)/k^2 < tolerance/10.

    Solved by fixed-point iteration on k^2 = 4 a^2 ln(10 / (tol k^2)).
    """
    if alpha <= 0 or tolerance <= 0:
        raise ValidationError("alpha and tolerance must be positive")
    target = tolerance / 10.0
    k = 2.0 * alpha
    for _ in range(200):
        arg = 1.0 / (target * k * k)
        k_new = 2.0 * alpha * math.sqrt(max(math.log(arg), 1e-12))
        if abs(k_new - k) < 1e-12 * k:
            k = k_new
            break
        k = k_new
    return k


@dataclass(frozen=True)
class SplittingParams:
    """Ewald splitting and estimator parameters.

    ``alpha`` is the real/reciprocal splitting parameter, ``r_cut`` the
    real-space cutoff, ``tolerance`` the k-space truncation tolerance
    (propagated to mode cutoffs), ``batch_size`` the number P of sampled
    modes per stochastic force evaluation.
    """

    alpha: float
    r_cut: float
    tolerance: float = 1e-6
    batch_size: int = 100

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if self.r_cut <= 0:
            raise ValidationError(f"r_cut must be positive, got {self.r_cut}")
        if self.tolerance <= 0:
            raise ValidationError(f"tolerance must be positive, got {self.tolerance}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def kmax(self) -> float:
        return suggest_kmax(self.alpha, self.tolerance)


@dataclass(frozen=True)
class EnergyBreakdown:
    """Per-term decomposition of a single-point energy evaluation.

    ``method`` records which route produced the numbers:

    * ``"ewald2d"`` — exact doubly-periodic sum; ``u_fourier`` holds the
      reciprocal h-sum plus the zero-mode term, ``u_ibc``/``u_elc`` are 0.
    * ``"ewald3d+ibc"`` — vacuum-layer reformulation; ``u_fourier`` is the
      3D-periodic mode sum and ``u_ibc`` the dipole boundary correction
      (``u_elc`` stays 0: the layer term is diagnostic, never added).
    * ``"rbe-mean"`` — like the above with the mode sum replaced by a
      batch-averaged estimate.

    Short-range contributions (``u_lj``, ``u_wall``) are zero unless the
    caller evaluated them.
    """

    u_real: float = 0.0
    u_fourier: float = 0.0
    u_self: float = 0.0
    u_ibc: float = 0.0
    u_elc: float = 0.0
    u_lj: float = 0.0
    u_wall: float = 0.0
    method: str = ""

    @property
    def total(self) -> float:
        return (self.u_real + self.u_fourier + self.u_self + self.u_ibc
                + self.u_elc + self.u_lj + self.u_wall)

    @property
    def coulomb(self) -> float:
        return self.u_real + self.u_fourier + self.u_self + self.u_ibc + self.u_elc

    def as_dict(self) -> dict:
        return {
            "u_real": self.u_real, "u_fourier": self.u_fourier,
            "u_self": self.u_self, "u_ibc": self.u_ibc, "u_elc": self.u_elc,
            "u_lj": self.u_lj, "u_wall": self.u_wall,
            "total": self.total, "method": self.method,
        }


# Stream ids: distinct named substreams of the master seed so the thermostat
# noise, the k-mode sampler, and initial velocities never share draws.
STREAM_INIT = 0
STREAM_THERMOSTAT = 1
STREAM_SAMPLER = 2


@dataclass(frozen=True)
class RngHandle:
    """Deterministic, splittable random stream: (seed, stream) -> Generator.

    Two handles with equal seed and stream produce bitwise-identical draw
    sequences; distinct streams are statistically independent.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def split(self, stream: int) -> "RngHandle":
        return RngHandle(self.seed, stream)
