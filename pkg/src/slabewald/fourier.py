"""Reciprocal-space machinery for the slab-confined Coulomb reformulation.

The doubly periodic (x, y) / confined (z) Coulomb sum is evaluated through
an artificial 3D-periodic cell of height ``lz > h`` plus planewise boundary
corrections.  For a neutral system the exact 2D-periodic reciprocal energy
splits into

* a plain 3D Ewald reciprocal sum over ``k = 2 pi (nx/lx, ny/ly, nz/lz)``
  with weights ``exp(-k^2 / 4 alpha^2) / k^2`` (``fourier3d_energy``),
* the k = 0 slab dipole correction ``(2 pi / V) (sum_i q_i z_i)^2``
  (``ibc_energy_force``),
* a layer-coupling remainder decaying like ``exp(-2 pi (lz - h) / lmax)``
  (``elc_energy``, diagnostic only), and
* a quadrature remainder decaying like ``exp(-alpha^2 (lz - h)^2)``
  (quantified by ``trapezoid_error_report``).

``choose_lz`` picks the artificial period so the last two terms drop below a
requested tolerance, which is what lets production runs skip the ELC term.

Dielectric mismatches at the two walls enter through the truncated image
series of :mod:`slabewald.core`.  In k-space the whole series collapses into
two z-phase coefficients per mode (``y_coefficients``), so a mode costs
O(N + M) work instead of O(N * M): even-level images multiply the plain
structure factor, odd-level (z-reflected) images multiply the structure
factor evaluated at the reflected wavevector ``(kx, ky, -kz)``.

Force evaluation is shared between the deterministic sums here and the
stochastic estimator in :mod:`slabewald.sampler` through
``kspace_force_kernel``, which accepts an arbitrary list of modes with
per-mode coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (
    DielectricSpec,
    ParticleSystem,
    SlabGeometry,
    StabilityError,
    ValidationError,
    image_series,
    suggest_kmax,
)

_SQRT_PI = math.sqrt(math.pi)

# Block size (in N * n_modes elements) for the mode-batched dense phase
# matrices; keeps peak memory for exp/structure-factor workspaces bounded.
_BLOCK_ELEMENTS = 4_000_000


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KMode:
    """One reciprocal mode of the artificial 3D-periodic cell."""

    nx: int
    ny: int
    nz: int
    kx: float
    ky: float
    kz: float

    @classmethod
    def from_integers(cls, n: tuple, geometry: SlabGeometry) -> "KMode":
        nx, ny, nz = (int(v) for v in n)
        if nx == 0 and ny == 0 and nz == 0:
            raise ValidationError("the zero mode is excluded from reciprocal sums")
        lz = _require_lz(geometry)
        two_pi = 2.0 * math.pi
        return cls(nx, ny, nz,
                   two_pi * nx / geometry.lx,
                   two_pi * ny / geometry.ly,
                   two_pi * nz / lz)

    @property
    def k(self) -> np.ndarray:
        return np.array([self.kx, self.ky, self.kz])

    @property
    def magnitude(self) -> float:
        return math.sqrt(self.kx**2 + self.ky**2 + self.kz**2)

    @property
    def reflected(self) -> np.ndarray:
        """The wavevector with its z component negated, ``(kx, ky, -kz)``."""
        return np.array([self.kx, self.ky, -self.kz])


def _require_lz(geometry: SlabGeometry) -> float:
    if geometry.lz is None:
        raise ValidationError("geometry.lz has not been chosen (see choose_lz)")
    return geometry.lz


def mode_cutoff(geometry: SlabGeometry, alpha: float, tolerance: float) -> int:
    """Integer mode cutoff for the largest cell dimension.

    Converts the physical cutoff of :func:`slabewald.core.suggest_kmax` to
    the integer index of the longest axis, so that every retained mode obeys
    ``|k| <= 2 pi k_max / max(lx, ly, lz)``.
    """
    lz = _require_lz(geometry)
    k_phys = suggest_kmax(alpha, tolerance)
    longest = max(geometry.lx, geometry.ly, lz)
    return max(1, math.ceil(k_phys * longest / (2.0 * math.pi)))


def mode_table(geometry: SlabGeometry, k_max: int, half: bool = True):
    """Enumerate nonzero reciprocal modes inside the spherical cutoff.

    The cutoff radius is ``k_cut = 2 pi k_max / max(lx, ly, lz)``; per-axis
    integer ranges follow as ``|n_d| <= k_max * L_d / max(L)``.  With
    ``half=True`` only one member of each ``{k, -k}`` pair is kept (the one
    with ``nz > 0``, breaking ties toward positive ny then nx); callers
    account for the partner with a factor 2 and a real projection.

    Returns ``(integers, kvecs)`` with shapes (P, 3), ordered by |k| then
    lexicographically so sums run in a fixed, documented order.
    """
    lz = _require_lz(geometry)
    if not isinstance(k_max, (int, np.integer)) or k_max < 1:
        raise ValidationError(f"k_max must be a positive integer, got {k_max!r}")
    dims = np.array([geometry.lx, geometry.ly, lz])
    two_pi = 2.0 * math.pi
    k_cut = two_pi * k_max / dims.max()
    n_bound = np.floor(k_cut * dims / two_pi + 1e-9).astype(int)
    axes = [np.arange(-b, b + 1) for b in n_bound]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    kvecs = two_pi * grid / dims
    k2 = np.einsum("ij,ij->i", kvecs, kvecs)
    mask = (k2 > 0.0) & (k2 <= k_cut * k_cut * (1.0 + 1e-12))
    if half:
        nx, ny, nz = grid[:, 0], grid[:, 1], grid[:, 2]
        mask &= (nz > 0) | ((nz == 0) & ((ny > 0) | ((ny == 0) & (nx > 0))))
    grid = grid[mask]
    kvecs = kvecs[mask]
    k2 = k2[mask]
    order = np.lexsort((grid[:, 2], grid[:, 1], grid[:, 0], k2))
    return grid[order], kvecs[order]


# ---------------------------------------------------------------------------
# image-series phase coefficients
# ---------------------------------------------------------------------------

def y_coefficients(kz, spec: DielectricSpec, h: float):
    """Collapse the image series into two per-mode phase coefficients.

    For a source at height z the level-l images sit at ``(-1)^l z + offset``.
    Even levels keep the sign of z, so their reciprocal-space contribution is
    the plain structure factor times ``y_even(kz) = sum_even f_l e^(i kz o_l)``;
    odd levels reflect z, pairing instead with the structure factor at the
    reflected wavevector through ``y_odd(kz) = sum_odd f_l e^(i kz o_l)``
    (``f_l``, ``o_l``: image charge factors and z offsets).

    Returns ``(y_odd, y_even)`` complex arrays matching the shape of ``kz``.
    """
    kz = np.atleast_1d(np.asarray(kz, dtype=float))
    series = image_series(spec, h)
    if len(series) == 0:
        zero = np.zeros(kz.shape, dtype=complex)
        return zero, zero.copy()
    phases = np.exp(1j * kz[:, None] * series.offsets[None, :])
    contrib = series.factors[None, :] * phases
    odd = series.levels % 2 == 1
    return contrib[:, odd].sum(axis=1), contrib[:, ~odd].sum(axis=1)


@dataclass(frozen=True)
class StructureFactors:
    """Charge structure factors over a fixed mode list.

    ``rho[p] = sum_i q_i exp(i k_p . r_i)``; ``rho_bar[p]`` extends the
    conjugate sum over the dielectric image charges (and reduces to
    ``conj(rho)`` when there are none).
    """

    rho: np.ndarray
    rho_bar: np.ndarray


def _rho_pair(positions, charges, kvecs, need_reflected):
    """Structure factor and (optionally) its reflected-z companion."""
    phase = positions @ kvecs.T
    ew = np.exp(1j * phase)
    rho = charges @ ew
    if not need_reflected:
        return rho, None, ew, None
    phase_ref = phase - 2.0 * positions[:, 2:3] * kvecs[:, 2][None, :]
    ew_ref = np.exp(1j * phase_ref)
    return rho, charges @ ew_ref, ew, ew_ref


# -- separable evaluation over integer-lattice mode lists -------------------
#
# When every mode is k = 2 pi (nx/lx, ny/ly, nz/lz), the phase factorises,
# exp(i k.r_i) = X[i,nx] Y[i,ny] Z[i,nz], so structure factors and force
# reductions become small per-axis tensor contractions: nothing of shape
# (N, P) is ever materialised, and only N x (axis range) exponentials are
# evaluated.  The results equal the dense-phase path up to roundoff.

def _lattice_tables(positions, dims, ints):
    """Per-axis phase tables ``exp(i 2 pi n x_d / L_d)`` and index offsets."""
    tables, offsets = [], []
    for axis in range(3):
        idx = ints[:, axis]
        lo = int(idx.min())
        theta = (2j * math.pi / dims[axis]) * positions[:, axis]
        tables.append(np.exp(np.outer(theta, np.arange(lo, int(idx.max()) + 1))))
        offsets.append(lo)
    return tables, offsets


def _lattice_rho(charges, tables, offsets, ints, need_reflected):
    """Structure factor over lattice modes: charge DFT box, then gather."""
    tx, ty, tz = tables
    n = len(charges)
    # box[nx, ny, nz] = sum_i q_i X[i,nx] Y[i,ny] Z[i,nz]
    d = ((charges[:, None] * tx)[:, :, None] * ty[:, None, :]).reshape(n, -1)
    box = d.T @ tz
    jx, jy, jz = (ints[:, a] - offsets[a] for a in range(3))
    shape3 = (tx.shape[1], ty.shape[1], tz.shape[1])
    rho = box.reshape(shape3)[jx, jy, jz]
    if not need_reflected:
        return rho, None
    # Reflecting z conjugates the z factor only.
    box_ref = d.T @ np.conj(tz)
    return rho, box_ref.reshape(shape3)[jx, jy, jz]


def _lattice_reduce(tables, offsets, ints, panel, reflect_z=False):
    """Per-particle sums ``sum_p exp(i k_p . r_i) panel[p, :]``.

    Scatters the per-mode panel onto the integer box (mode triples are
    unique) and contracts the axes one at a time against the phase tables.
    With ``reflect_z`` the z factor is conjugated, giving the sums over the
    z-mirrored phases that the odd image levels pair with.
    """
    tx, ty, tz = tables
    if reflect_z:
        tz = np.conj(tz)
    nx, ny, nz = tx.shape[1], ty.shape[1], tz.shape[1]
    n_cols = panel.shape[1]
    jx, jy, jz = (ints[:, a] - offsets[a] for a in range(3))
    box = np.zeros((nx, ny, nz, n_cols), dtype=complex)
    box[jx, jy, jz] = panel
    # contract z (BLAS), then y and x per particle
    flat = box.reshape(nx * ny, nz, n_cols).transpose(1, 0, 2).reshape(nz, -1)
    h = (tz @ flat).reshape(len(tz), nx, ny, n_cols)
    hy = (h * ty[:, None, :, None]).sum(axis=2)
    return (hy * tx[:, :, None]).sum(axis=1)


def _uses_images(spec: DielectricSpec | None) -> bool:
    return spec is not None and not spec.is_homogeneous


def structure_factors(system: ParticleSystem, kvecs: np.ndarray,
                      spec: DielectricSpec | None = None) -> StructureFactors:
    kvecs = np.atleast_2d(np.asarray(kvecs, dtype=float))
    if not _uses_images(spec):
        rho, _, _, _ = _rho_pair(system.positions, system.charges, kvecs, False)
        return StructureFactors(rho, np.conj(rho))
    rho, rho_ref, _, _ = _rho_pair(system.positions, system.charges, kvecs, True)
    y_odd, y_even = y_coefficients(kvecs[:, 2], spec, system.geometry.h)
    rho_bar = np.conj((1.0 + y_even) * rho + y_odd * rho_ref)
    return StructureFactors(rho, rho_bar)


# ---------------------------------------------------------------------------
# reciprocal energies
# ---------------------------------------------------------------------------

def _mode_blocks(n_modes: int, n_particles: int):
    block = max(1, _BLOCK_ELEMENTS // max(n_particles, 1))
    for start in range(0, n_modes, block):
        yield start, min(start + block, n_modes)


def _kspace_energy(system: ParticleSystem, alpha: float, k_max: int,
                   spec: DielectricSpec | None) -> float:
    geometry = system.geometry
    system.require_neutral()
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    # Per-mode weight 2 (2 pi / V) exp(-k^2/4a^2) / k^2: the factor 2 stands
    # for the {k, -k} pair and makes the weight coincide with the force
    # coefficient table, which is cached across calls.
    ints, kvecs, weights = _deterministic_coeffs(geometry, alpha, k_max)
    dims = (geometry.lx, geometry.ly, geometry.lz)
    use_images = _uses_images(spec)
    pos, q = system.positions, system.charges
    tables, offsets = _lattice_tables(pos, dims, ints)
    rho, rho_ref = _lattice_rho(q, tables, offsets, ints, use_images)
    if use_images:
        y_odd, y_even = y_coefficients(kvecs[:, 2], spec, geometry.h)
        rho_bar = np.conj((1.0 + y_even) * rho + y_odd * rho_ref)
        mode_u = (rho * rho_bar).real
    else:
        mode_u = rho.real**2 + rho.imag**2
    u_self = alpha / _SQRT_PI * math.fsum(q * q)
    return math.fsum(weights * mode_u) - u_self


def fourier3d_energy(system: ParticleSystem, alpha: float, k_max: int) -> float:
    """Gaussian-weighted 3D reciprocal sum minus the self energy.

    ``(2 pi / V) sum'_k exp(-k^2/4a^2)/k^2 |rho_k|^2 - (a/sqrt(pi)) sum q^2``
    over the modes of :func:`mode_table`.  Requires ``geometry.lz`` and a
    neutral system; the slab dipole and layer corrections are separate
    (:func:`ibc_energy_force`, :func:`elc_energy`).
    """
    return _kspace_energy(system, alpha, k_max, None)


def _check_image_stability(geometry: SlabGeometry, spec: DielectricSpec) -> None:
    lz = _require_lz(geometry)
    needed = (spec.n_levels + 1) * geometry.h
    if lz < needed:
        raise StabilityError(
            f"lz={lz:g} cannot accommodate {spec.n_levels} image levels: the "
            f"image stack spans {needed:g}; images of periodic replicas would "
            "alias into the cell. Increase lz (see choose_lz) or reduce "
            "n_levels."
        )


def dielectric_fourier_energy(system: ParticleSystem, spec: DielectricSpec,
                              alpha: float, k_max: int,
                              check_stability: bool = True) -> float:
    """Reciprocal sum with the image-extended conjugate structure factor.

    Equals :func:`fourier3d_energy` when the spec carries no images.  With
    ``check_stability`` (default) the artificial period must contain the
    whole image stack, ``lz >= (n_levels + 1) h``; passing False permits
    entering the unstable regime deliberately (e.g. to study how the error
    diverges), not for production use.
    """
    if check_stability:
        _check_image_stability(system.geometry, spec)
    else:
        _require_lz(system.geometry)
    return _kspace_energy(system, alpha, k_max, spec)


# ---------------------------------------------------------------------------
# reciprocal forces
# ---------------------------------------------------------------------------

def kspace_force_kernel(positions: np.ndarray, charges: np.ndarray,
                        kvecs: np.ndarray, coeffs: np.ndarray,
                        y_odd: np.ndarray | None = None,
                        y_even: np.ndarray | None = None,
                        ints: np.ndarray | None = None,
                        dims=None) -> np.ndarray:
    """Accumulate reciprocal-space forces over an arbitrary mode list.

    For each mode ``k_p`` with coefficient ``c_p`` the contribution to
    particle i is ``c_p q_i Im[k A - ((1 + conj(y_even)) k
    + e^(2 i kz z_i) conj(y_odd) k~) e^(-i k.r_i) rho_k]`` where
    ``A = e^(i k.r_i) rho_bar_k`` and ``k~ = (kx, ky, -kz)`` is the
    reflected wavevector carried by the odd (z-mirrored) image levels.
    Without image coefficients this reduces to
    ``-2 c_p q_i k Im(e^(-i k.r_i) rho_k)``.

    Deterministic sums pass half-space modes with
    ``c_p = (4 pi / V) exp(-k^2/4a^2) / k^2``; the stochastic estimator
    passes sampled full-space modes with ``c_p = (S / P) (2 pi / V) / k^2``.
    Integer-lattice mode lists may add ``ints``/``dims`` to route the whole
    evaluation through the separable per-axis contractions (see
    ``_lattice_tables``).  Cost is O(P (N + M)) after the y precompute.

    The reductions below run as matrix products over (modes, axes) panels.
    They use ``Im(conj(x) y) = -Im(x conj(y))`` to fold every term into
    products against ``ew`` itself, so no conjugated N x P temporary is
    formed: with ``B?`` the per-mode (P, 3) panels,

        homogeneous:  F = q Im[ ew  (2 c conj(rho) k) ]
        images:  F_xy = q Im[ ew B_ab + ew_ref B_c ]_xy,
                 F_z  = q Im[ ew B_ab - ew_ref B_c ]_z,
                 B_ab = c (rho_bar + (1 + y_even) conj(rho)) k,
                 B_c  = c y_odd conj(rho) k~.

    which reproduces the per-mode formula above term by term.
    """
    positions = np.asarray(positions, dtype=float)
    charges = np.asarray(charges, dtype=float)
    kvecs = np.atleast_2d(np.asarray(kvecs, dtype=float))
    coeffs = np.asarray(coeffs, dtype=float)
    n = len(positions)
    forces = np.zeros((n, 3))
    use_images = y_odd is not None and (np.any(y_odd) or np.any(y_even))
    if ints is not None:
        tables, offsets = _lattice_tables(positions, dims, ints)
        rho, rho_ref = _lattice_rho(charges, tables, offsets, ints, use_images)
        if not use_images:
            panel = (2.0 * coeffs * np.conj(rho))[:, None] * kvecs
            forces += _lattice_reduce(tables, offsets, ints, panel).imag
        else:
            rho_bar = np.conj((1.0 + y_even) * rho + y_odd * rho_ref)
            panel_ab = (coeffs * (rho_bar
                                  + (1.0 + y_even) * np.conj(rho)))[:, None] * kvecs
            panel_c = (coeffs * y_odd * np.conj(rho))[:, None] * kvecs
            g_ab = _lattice_reduce(tables, offsets, ints, panel_ab).imag
            g_c = _lattice_reduce(tables, offsets, ints, panel_c,
                                  reflect_z=True).imag
            forces[:, 0] += g_ab[:, 0] + g_c[:, 0]
            forces[:, 1] += g_ab[:, 1] + g_c[:, 1]
            forces[:, 2] += g_ab[:, 2] - g_c[:, 2]
        forces *= charges[:, None]
        return forces
    for lo, hi in _mode_blocks(len(kvecs), n):
        kb = kvecs[lo:hi]
        cb = coeffs[lo:hi]
        rho, rho_ref, ew, ew_ref = _rho_pair(positions, charges, kb, use_images)
        if not use_images:
            panel = (2.0 * cb * np.conj(rho))[:, None] * kb
            forces += (ew @ panel).imag
        else:
            yo = y_odd[lo:hi]
            ye = y_even[lo:hi]
            rho_bar = np.conj((1.0 + ye) * rho + yo * rho_ref)
            panel_ab = (cb * (rho_bar + (1.0 + ye) * np.conj(rho)))[:, None] * kb
            panel_c = (cb * yo * np.conj(rho))[:, None] * kb
            g_ab = (ew @ panel_ab).imag
            g_c = (ew_ref @ panel_c).imag
            forces[:, 0] += g_ab[:, 0] + g_c[:, 0]
            forces[:, 1] += g_ab[:, 1] + g_c[:, 1]
            forces[:, 2] += g_ab[:, 2] - g_c[:, 2]
    forces *= charges[:, None]
    return forces


@lru_cache(maxsize=8)
def _mode_cache(lx: float, ly: float, h: float, lz: float,
                alpha: float, k_max: int):
    geometry = SlabGeometry(lx, ly, h, lz=lz)
    ints, kvecs = mode_table(geometry, k_max, half=True)
    k2 = np.einsum("ij,ij->i", kvecs, kvecs)
    coeffs = (4.0 * math.pi / geometry.volume) \
        * np.exp(-k2 / (4.0 * alpha * alpha)) / k2
    for arr in (ints, kvecs, coeffs):
        arr.setflags(write=False)
    return ints, kvecs, coeffs


def _deterministic_coeffs(geometry: SlabGeometry, alpha: float, k_max: int):
    """Half-space mode table with Gaussian-screened coefficients.

    Cached on the scalar inputs: an engine evaluating forces every step in a
    fixed cell reuses one table instead of re-enumerating modes.  The arrays
    are marked read-only because cache entries are shared across callers.
    """
    return _mode_cache(geometry.lx, geometry.ly, geometry.h,
                       _require_lz(geometry), float(alpha), int(k_max))


def fourier3d_force(system: ParticleSystem, alpha: float, k_max: int) -> np.ndarray:
    """Exact gradient of :func:`fourier3d_energy` at the same truncation."""
    system.require_neutral()
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    geometry = system.geometry
    ints, kvecs, coeffs = _deterministic_coeffs(geometry, alpha, k_max)
    return kspace_force_kernel(system.positions, system.charges, kvecs, coeffs,
                               ints=ints,
                               dims=(geometry.lx, geometry.ly, geometry.lz))


def dielectric_fourier_force(system: ParticleSystem, spec: DielectricSpec,
                             alpha: float, k_max: int,
                             check_stability: bool = True) -> np.ndarray:
    """Exact gradient of :func:`dielectric_fourier_energy`.

    Gradients are taken through the image positions as well: the images of
    particle i move with it (even levels in step, odd levels mirrored),
    which is what the reflected-wavevector term in the kernel encodes.
    """
    if check_stability:
        _check_image_stability(system.geometry, spec)
    else:
        _require_lz(system.geometry)
    system.require_neutral()
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    geometry = system.geometry
    ints, kvecs, coeffs = _deterministic_coeffs(geometry, alpha, k_max)
    dims = (geometry.lx, geometry.ly, geometry.lz)
    if not _uses_images(spec):
        return kspace_force_kernel(system.positions, system.charges, kvecs,
                                   coeffs, ints=ints, dims=dims)
    y_odd, y_even = y_coefficients(kvecs[:, 2], spec, geometry.h)
    return kspace_force_kernel(system.positions, system.charges, kvecs, coeffs,
                               y_odd, y_even, ints=ints, dims=dims)


# ---------------------------------------------------------------------------
# k = 0 slab dipole term
# ---------------------------------------------------------------------------

def ibc_energy_force(system: ParticleSystem,
                     spec: DielectricSpec | None = None):
    """Slab dipole correction of the artificial 3D-periodic cell.

    Homogeneous: ``U = (2 pi / V) D^2`` with ``D = sum_i q_i z_i`` and
    ``F_z,i = -(4 pi / V) q_i D``.  With images, ``D`` pairs with the
    image-extended moment ``D_bar = sum_j q_j (z_j + sum_l f_l z_images)``
    and the z force picks up the co-moving image gradient
    ``g = 1 + sum_l (-1)^l f_l``:

        U = (2 pi / V) D D_bar,   F_z,i = -(2 pi / V) q_i (D_bar + g D).

    Returns ``(energy, forces)`` with forces of shape (N, 3), xy columns
    zero.  Requires ``geometry.lz`` and a neutral system.
    """
    geometry = system.geometry
    volume = geometry.volume
    system.require_neutral()
    q = system.charges
    z = system.positions[:, 2]
    dipole = math.fsum(q * z)
    if not _uses_images(spec):
        d_bar = dipole
        gain = 1.0
    else:
        series = image_series(spec, geometry.h)
        z_images = series.z_images(z)
        d_bar = dipole + math.fsum(series.factors * (z_images @ q))
        gain = 1.0 + math.fsum(series.factors * series.signs)
    prefactor = 2.0 * math.pi / volume
    energy = prefactor * dipole * d_bar
    forces = np.zeros((system.n, 3))
    forces[:, 2] = -prefactor * q * (d_bar + gain * dipole)
    return energy, forces


# ---------------------------------------------------------------------------
# layer-coupling diagnostic
# ---------------------------------------------------------------------------

def beta_closed_form(h: float, z_i: float, z_j: float,
                     gamma_top: float, gamma_bottom: float,
                     h_slab: float) -> float:
    """Infinite image series of the in-plane mode kernel, summed exactly.

    For one in-plane mode of magnitude ``h`` the image interactions
    ``sum_l f_l e^(-h |z_i - z_image_l(z_j)|)`` form a geometric series with
    ratio ``gamma_top gamma_bottom e^(-2 h H)``:

        beta = [gb e^(-h (z_i+z_j)) + gt e^(-h (2H - z_i - z_j))
                + gt gb (e^(-h (2H - dz)) + e^(-h (2H + dz)))] * zeta,
        zeta = 1 / (1 - gt gb e^(-2 h H)),   dz = z_i - z_j.

    This is the exactly-summed counterpart of the truncated level sum and
    pins down the image-factor convention: truncating the series reproduces
    the closed form only if odd levels carry the factors of the wall they
    reflect through first.
    """
    if h <= 0:
        raise ValidationError(f"mode magnitude h must be positive, got {h}")
    if h_slab <= 0:
        raise ValidationError(f"slab height must be positive, got {h_slab}")
    ratio = gamma_top * gamma_bottom * math.exp(-2.0 * h * h_slab)
    if abs(ratio) >= 1.0:
        raise ValidationError(
            "image series does not converge: |gamma_top gamma_bottom "
            f"e^(-2 h H)| = {abs(ratio):g} >= 1"
        )
    zeta = 1.0 / (1.0 - ratio)
    dz = z_i - z_j
    bracket = (
        gamma_bottom * math.exp(-h * (z_i + z_j))
        + gamma_top * math.exp(-h * (2.0 * h_slab - z_i - z_j))
        + gamma_top * gamma_bottom * (
            math.exp(-h * (2.0 * h_slab - dz)) + math.exp(-h * (2.0 * h_slab + dz))
        )
    )
    return bracket * zeta


def _xy_mode_magnitudes(geometry: SlabGeometry, h_max: int):
    """Half-space in-plane modes and magnitudes, origin excluded."""
    mx, my = np.meshgrid(np.arange(-h_max, h_max + 1),
                         np.arange(-h_max, h_max + 1), indexing="ij")
    mx, my = mx.ravel(), my.ravel()
    keep = (my > 0) | ((my == 0) & (mx > 0))
    mx, my = mx[keep], my[keep]
    hx = 2.0 * math.pi * mx / geometry.lx
    hy = 2.0 * math.pi * my / geometry.ly
    return hx, hy, np.hypot(hx, hy)


def _layer_kernel(h: float, dist: np.ndarray, lz: float) -> np.ndarray:
    """``cosh(h d) / (1 - e^(h lz))`` with only negative exponents.

    Requires ``|d| < lz``; both exponentials then stay in (0, 1] and the
    subtraction in the denominator is benign.
    """
    ad = np.abs(dist)
    em = math.exp(-h * lz)
    return -(np.exp(h * (ad - lz)) + np.exp(-h * (ad + lz))) / (2.0 * (1.0 - em))


def elc_energy(system: ParticleSystem, spec: DielectricSpec | None = None,
               h_max: int = 16) -> float:
    """Layer-coupling energy of the artificial periodic images in z.

    Diagnostic O(N^2) evaluation of the coupling between the slab and its
    artificial z replicas,

        (2 pi / A) sum_ij q_i q_j sum'_h cos(h . rho_ij) K(z terms) / h,

    with ``K = cosh(h dz) / (1 - e^(h lz))`` plus one image-shifted term per
    level.  Production runs never add this term; they pick ``lz`` via
    :func:`choose_lz` so it is below tolerance.  Raises
    :class:`StabilityError` when the image stack reaches the artificial
    period (``lz < (n_levels + 1) h``), where the decay argument flips sign.
    """
    geometry = system.geometry
    lz = _require_lz(geometry)
    if _uses_images(spec):
        _check_image_stability(geometry, spec)
        series = image_series(spec, geometry.h)
    else:
        series = None
    system.require_neutral()
    pos, q = system.positions, system.charges
    z = pos[:, 2]
    dz = z[:, None] - z[None, :]
    qq = q[:, None] * q[None, :]
    hx, hy, hmag = _xy_mode_magnitudes(geometry, h_max)
    if series is not None:
        z_images = series.z_images(z)  # (2M, N)
    parts = []
    for p in range(len(hmag)):
        h = hmag[p]
        phase = np.exp(1j * (hx[p] * pos[:, 0] + hy[p] * pos[:, 1]))
        cos_m = np.real(phase[:, None] * np.conj(phase)[None, :])
        kernel = _layer_kernel(h, dz, lz)
        if series is not None:
            for e in range(len(series)):
                d_img = z[:, None] - z_images[e][None, :]
                kernel = kernel + series.factors[e] * _layer_kernel(h, d_img, lz)
        parts.append(np.sum(qq * cos_m * kernel) / h)
    # half-space modes: factor 2 restores the {h, -h} partners
    return (2.0 * math.pi / geometry.area) * 2.0 * math.fsum(parts)


# ---------------------------------------------------------------------------
# parameter selection
# ---------------------------------------------------------------------------

def choose_lz(geometry: SlabGeometry, alpha: float, tolerance: float,
              n_levels: int = 0) -> float:
    """Artificial period making the neglected corrections <= tolerance.

    Pads the image-stack extent ``(n_levels + 1) h`` by enough that both the
    layer coupling, ~``e^(-2 pi pad / lmax)``, and the quadrature remainder,
    ~``e^(-alpha^2 pad^2)``, drop below ``tolerance``:

        lz = (n_levels + 1) h
             + max(lmax ln(1/tol) / (2 pi),  sqrt(ln(1/tol)) / alpha).
    """
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if not 0.0 < tolerance < 1.0:
        raise ValidationError(f"tolerance must lie in (0, 1), got {tolerance}")
    if n_levels < 0:
        raise ValidationError(f"n_levels must be non-negative, got {n_levels}")
    log_term = math.log(1.0 / tolerance)
    pad = max(geometry.lmax * log_term / (2.0 * math.pi),
              math.sqrt(log_term) / alpha)
    return (n_levels + 1) * geometry.h + pad


def choose_n_levels(geometry: SlabGeometry, spec: DielectricSpec,
                    tolerance: float, safety: int = 0) -> int:
    """Image-series truncation level for a requested relative tolerance.

    The level-l image amplitude scales like ``|gt gb|^(l/2) e^(-2 pi l h /
    lmax)`` relative to the direct term, giving the asymptotic estimate

        M ~ (2 ln tol - 4 pi h / lmax - ln|gt gb|)
            / (ln|gt gb| - 4 pi h / lmax),

    rounded up.  With a single reflecting wall the series terminates: level
    one is exact, so 1 is returned.  ``safety`` adds extra levels on top
    (configurable margin for cautious runs).
    """
    if not 0.0 < tolerance < 1.0:
        raise ValidationError(f"tolerance must lie in (0, 1), got {tolerance}")
    if safety < 0:
        raise ValidationError(f"safety must be non-negative, got {safety}")
    gt, gb = spec.gamma_top, spec.gamma_bottom
    product = abs(gt * gb)
    if product > 1.0:
        raise ValidationError(f"|gamma_top * gamma_bottom| = {product:g} > 1")
    if product == 0.0:
        if gt == 0.0 and gb == 0.0:
            return safety if safety else 0
        return 1 + safety
    decay = 4.0 * math.pi * geometry.h / geometry.lmax
    estimate = (2.0 * math.log(tolerance) - decay - math.log(product)) \
        / (math.log(product) - decay)
    return max(math.ceil(estimate), 0) + safety


# ---------------------------------------------------------------------------
# trapezoidal quadrature error
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureErrorReport:
    """Error model of the uniform-grid discretization in kz.

    ``residue_correction`` is the exact pole contribution to the quadrature
    error of ``int exp(-(a^2+t^2)) / (a^2+t^2) e^(i b t) dt`` on a grid of
    spacing ``xi``; ``remainder_order`` is the exponent of the remaining
    error term, i.e. remaining error ~ ``O(e^(remainder_order))``.
    """

    residue_correction: float
    remainder_order: float

    @property
    def remainder_envelope(self) -> float:
        return math.exp(self.remainder_order)


def trapezoid_error_report(a: float, b: float, xi: float) -> QuadratureErrorReport:
    """Quadrature error of the uniform grid applied to the mode integrand.

    The reciprocal reformulation discretizes a continuous kz integral with
    grid spacing ``xi = pi / (alpha lz)``; per in-plane mode the integrand
    has poles at ``+- i a``.  The error splits into the exact residue pickup

        (pi / a) (e^(-a b) + e^(a b)) / (1 - e^(2 pi a / xi))

    plus a remainder of order ``e^(-sign(u) u^2)`` with ``u = pi/xi - |b|/2``.
    The residue term is what the k = 0 and layer corrections resum; driving
    the remainder below tolerance is what sizes ``lz`` in :func:`choose_lz`.
    """
    if a <= 0:
        raise ValidationError(
            f"pole offset a must be positive (a = 0 puts the pole on the grid), got {a}")
    if xi <= 0:
        raise ValidationError(f"grid spacing xi must be positive, got {xi}")
    t = 2.0 * math.pi * a / xi
    if a * abs(b) > 700.0:
        raise ValidationError("a*|b| too large: residue exceeds double range")
    if t > 40.0:
        # 1 - e^t ~ -e^t: fold the denominator into the exponents to avoid
        # overflow for fine grids.
        residue = -(math.pi / a) * (math.exp(-a * b - t) + math.exp(a * b - t))
    else:
        residue = (math.pi / a) * (math.exp(-a * b) + math.exp(a * b)) \
            / (1.0 - math.exp(t))
    u = math.pi / xi - 0.5 * abs(b)
    sign = 1.0 if u > 0 else (-1.0 if u < 0 else 0.0)
    remainder_order = -sign * u * u
    return QuadratureErrorReport(residue, remainder_order)
