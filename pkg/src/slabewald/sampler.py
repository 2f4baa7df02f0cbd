"""Stochastic reciprocal-space force estimation by random mode batches.

Instead of summing every reciprocal mode each step, a small batch of P
modes is drawn from the Gaussian importance distribution

    P(k)  proportional to  exp(-k^2 / 4 alpha^2),   k != 0,

and the mode sum is replaced by the importance-sampling estimate

    F_i  ~  - sum_{l=1..P} (S / P) (4 pi q_i k_l / V k_l^2)
            Im(e^{-i k_l . r_i} rho(k_l)),

where ``S = sum_{k != 0} exp(-k^2/4 alpha^2)`` is the normalizing constant.
The estimator is unbiased with O(1/P) variance independent of particle
number and of the artificial period, which is what makes the per-step cost
O(P N) instead of O(N k_max^3).

Sampling runs P persistent Metropolis chains over the integer mode lattice
(vectorized; integer-rounded Gaussian proposals), regenerated once per MD
step.  Dielectric walls reuse the same batch: the image series enters only
through the per-mode phase coefficients of
:func:`slabewald.fourier.y_coefficients`, keeping the per-step cost
O(P (N + M)).  The deterministic k = 0 slab dipole force is added inside
the estimators, so their output is the complete k-space force.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (
    DielectricSpec,
    ParticleSystem,
    RngHandle,
    SlabGeometry,
    ValidationError,
)
from .fourier import (
    KMode,
    _check_image_stability,
    _require_lz,
    _rho_pair,
    _uses_images,
    ibc_energy_force,
    kspace_force_kernel,
    mode_table,
    y_coefficients,
)


# ---------------------------------------------------------------------------
# normalization constant
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _exact_s(lx: float, ly: float, lz: float, alpha: float) -> float:
    # The lattice Gaussian sum factorizes over axes:
    #   sum_{k != 0} e^{-k^2/4a^2} = theta(lx) theta(ly) theta(lz) - 1,
    #   theta(L) = 1 + 2 sum_{n >= 1} e^{-(pi n / (alpha L))^2}.
    thetas = []
    for dim in (lx, ly, lz):
        ratio = math.pi / (alpha * dim)
        total, n = 1.0, 1
        while True:
            term = 2.0 * math.exp(-((ratio * n) ** 2))
            if term < 1e-17 * total:
                break
            total += term
            n += 1
        thetas.append(total)
    return thetas[0] * thetas[1] * thetas[2] - 1.0


def normalization_s(geometry: SlabGeometry, alpha: float,
                    method: str = "exact") -> float:
    """Normalizing constant ``S`` of the Gaussian mode distribution.

    ``method="exact"``: the converged lattice sum (cached per geometry and
    alpha; terms below 1e-16 of the running total are dropped).
    ``method="gaussian-bound"``: the continuum estimate ``alpha^3 V /
    pi^(3/2)``, used only for diagnostics.  It bounds the exact sum from
    above in the operating regime (alpha L greater than about 2 per axis);
    for very narrow Gaussians the lattice sum exceeds the continuum value
    (Poisson-summation correction ~ 2 e^{-(alpha L)^2} per axis).
    """
    lz = _require_lz(geometry)
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if method == "exact":
        return _exact_s(geometry.lx, geometry.ly, lz, alpha)
    if method == "gaussian-bound":
        return alpha**3 * geometry.volume / math.pi**1.5
    raise ValidationError(f"unknown method {method!r}: use 'exact' or 'gaussian-bound'")


# ---------------------------------------------------------------------------
# mode batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KBatch:
    """A batch of reciprocal modes plus everything the estimators need.

    ``ints``/``kvecs`` hold the P sampled integer triples and physical
    wavevectors (duplicates allowed; the zero mode never appears).  ``s`` is
    the normalization constant.  ``y_odd``/``y_even`` are the per-mode image
    phase coefficients, filled by :func:`precompute_y` (None until then).
    ``weights`` is None for sampled batches; an exhaustive batch carries the
    explicit Gaussian weight of each mode instead of the uniform S / P.
    """

    ints: np.ndarray
    kvecs: np.ndarray
    s: float
    y_odd: np.ndarray | None = None
    y_even: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.ints.ndim != 2 or self.ints.shape[1] != 3 \
                or self.kvecs.shape != self.ints.shape:
            raise ValidationError("ints and kvecs must both have shape (P, 3)")
        if np.any(np.all(self.ints == 0, axis=1)):
            raise ValidationError("batch contains the excluded zero mode")
        if not self.s > 0:
            raise ValidationError(f"normalization must be positive, got {self.s}")

    def __len__(self) -> int:
        return len(self.ints)

    def modes(self, geometry: SlabGeometry) -> list[KMode]:
        return [KMode.from_integers(tuple(n), geometry) for n in self.ints]


class ModeSampler:
    """P persistent Metropolis chains over the nonzero integer mode lattice.

    Target distribution proportional to ``exp(-|k|^2 / 4 alpha^2)`` with
    ``k = 2 pi n / L`` per axis.  Proposals displace each axis by an
    integer-rounded Gaussian of standard deviation ``max(1,
    round(alpha L / pi))`` (symmetric, so plain Metropolis acceptance
    applies); proposals landing on the zero triple are rejected.  Chains are
    initialized from the rounded target Gaussian and burned in for ten
    vectorized sweeps (10 P single-mode updates).

    The chain state persists across calls, so consecutive batches are
    successive states of the same ergodic chains rather than independent
    redraws; ``thin`` extra sweeps can be inserted between batches when
    closer-to-independent draws matter (distribution tests).
    """

    def __init__(self, geometry: SlabGeometry, alpha: float, batch_size: int,
                 rng: RngHandle | np.random.Generator, thin: int = 1) -> None:
        lz = _require_lz(geometry)
        if alpha <= 0:
            raise ValidationError(f"alpha must be positive, got {alpha}")
        if batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
        if thin < 1:
            raise ValidationError(f"thin must be >= 1, got {thin}")
        self.geometry = geometry
        self.alpha = alpha
        self.batch_size = batch_size
        self.thin = thin
        self._rng = rng.generator() if isinstance(rng, RngHandle) else rng
        self._dims = np.array([geometry.lx, geometry.ly, lz])
        self._two_pi = 2.0 * math.pi
        # -log target = |k|^2 / 4 alpha^2 with k = 2 pi n / L
        self._quad = (self._two_pi / self._dims) ** 2 / (4.0 * alpha * alpha)
        self._sigma = np.maximum(
            1.0, np.round(alpha * self._dims / math.pi))
        self._s = normalization_s(geometry, alpha)
        target_sigma = alpha * self._dims / (math.sqrt(2.0) * math.pi)
        state = np.round(self._rng.normal(
            0.0, target_sigma, size=(batch_size, 3))).astype(int)
        zero = np.all(state == 0, axis=1)
        state[zero, 0] = 1
        self._state = state
        self._neg_log = self._neg_log_target(state)
        self._accepted = 0
        self._proposed = 0
        self._sweep(10)

    def _neg_log_target(self, n: np.ndarray) -> np.ndarray:
        return (n * n) @ self._quad

    def _sweep(self, count: int) -> None:
        for _ in range(count):
            step = np.round(self._rng.normal(
                0.0, self._sigma, size=self._state.shape)).astype(int)
            proposal = self._state + step
            nonzero = ~np.all(proposal == 0, axis=1)
            neg_log_new = self._neg_log_target(proposal)
            log_u = np.log(self._rng.uniform(size=len(proposal)))
            accept = nonzero & (log_u < self._neg_log - neg_log_new)
            self._state[accept] = proposal[accept]
            self._neg_log[accept] = neg_log_new[accept]
            self._accepted += int(np.count_nonzero(accept))
            self._proposed += len(proposal)

    @property
    def acceptance_rate(self) -> float:
        return self._accepted / max(self._proposed, 1)

    def sample_batch(self) -> KBatch:
        """Advance all chains and return their states as the next batch."""
        self._sweep(self.thin)
        ints = self._state.copy()
        kvecs = self._two_pi * ints / self._dims
        return KBatch(ints=ints, kvecs=kvecs, s=self._s)


def sample_batch(batch_size: int, geometry: SlabGeometry, alpha: float,
                 rng: RngHandle | np.random.Generator) -> KBatch:
    """One-shot batch draw (fresh burned-in chains; see :class:`ModeSampler`).

    MD runs should hold a :class:`ModeSampler` instead so the chain state
    persists across steps.
    """
    return ModeSampler(geometry, alpha, batch_size, rng).sample_batch()


def exhaustive_batch(geometry: SlabGeometry, alpha: float, k_max: int) -> KBatch:
    """Every nonzero mode inside the cutoff, carrying its exact weight.

    The returned batch makes the stochastic estimators collapse to the
    deterministic truncated mode sums (consistency mode): each mode appears
    once over the full +-k set with weight ``exp(-k^2 / 4 alpha^2)`` in
    place of the uniform S / P.
    """
    ints, kvecs = mode_table(geometry, k_max, half=False)
    k2 = np.einsum("ij,ij->i", kvecs, kvecs)
    weights = np.exp(-k2 / (4.0 * alpha * alpha))
    return KBatch(ints=ints, kvecs=kvecs,
                  s=normalization_s(geometry, alpha), weights=weights)


def precompute_y(batch: KBatch, spec: DielectricSpec, h: float) -> KBatch:
    """Fill the per-mode image phase coefficients (cost O(P M))."""
    y_odd, y_even = y_coefficients(batch.kvecs[:, 2], spec, h)
    return dataclasses.replace(batch, y_odd=y_odd, y_even=y_even)


# ---------------------------------------------------------------------------
# force estimators
# ---------------------------------------------------------------------------

def _batch_coefficients(system: ParticleSystem, alpha: float, batch: KBatch,
                        literal_gaussian_weight: bool) -> np.ndarray:
    volume = system.geometry.volume
    k2 = np.einsum("ij,ij->i", batch.kvecs, batch.kvecs)
    if batch.weights is not None:
        if literal_gaussian_weight:
            raise ValidationError(
                "literal_gaussian_weight does not apply to exhaustive batches "
                "(their weights already carry the Gaussian factor)")
        return (2.0 * math.pi / volume) * batch.weights / k2
    coeffs = (batch.s / len(batch)) * (2.0 * math.pi / volume) / k2
    if literal_gaussian_weight:
        # Debug variant: keep the Gaussian factor inside the summand even
        # though the modes were drawn from that same Gaussian.  Biased (the
        # factor is counted twice); kept only to demonstrate that bias.
        coeffs = coeffs * np.exp(-k2 / (4.0 * alpha * alpha))
    return coeffs


def rbe_force_homogeneous(system: ParticleSystem, alpha: float, batch: KBatch,
                          literal_gaussian_weight: bool = False) -> np.ndarray:
    """Random-batch reciprocal force plus the deterministic dipole force.

    Per mode: ``-(S/P) (4 pi q_i k / V k^2) Im(e^{-i k . r_i} rho_k)``; the
    Gaussian factor lives in the sampling distribution, not the summand
    (``literal_gaussian_weight=True`` restores it for bias demonstrations).
    The batch average is an unbiased estimate of the full reciprocal-space
    force; the k = 0 slab dipole force is added deterministically.
    """
    system.require_neutral()
    coeffs = _batch_coefficients(system, alpha, batch, literal_gaussian_weight)
    forces = kspace_force_kernel(system.positions, system.charges,
                                 batch.kvecs, coeffs)
    _, f_ibc = ibc_energy_force(system)
    return forces + f_ibc


def rbe_force_dielectric(system: ParticleSystem, spec: DielectricSpec,
                         alpha: float, batch: KBatch,
                         check_stability: bool = True,
                         literal_gaussian_weight: bool = False) -> np.ndarray:
    """Random-batch reciprocal force with dielectric images.

    Same estimator over the same batch; the truncated image series enters
    only through the precomputed per-mode phase coefficients (call
    :func:`precompute_y` on the batch first), so the cost stays
    O(P (N + M)).  The image-extended k = 0 dipole force is added
    deterministically.  With no image levels this reduces bitwise to
    :func:`rbe_force_homogeneous`.
    """
    if check_stability:
        _check_image_stability(system.geometry, spec)
    system.require_neutral()
    coeffs = _batch_coefficients(system, alpha, batch, literal_gaussian_weight)
    if _uses_images(spec):
        if batch.y_odd is None:
            raise ValidationError(
                "batch has no image coefficients: run precompute_y first")
        forces = kspace_force_kernel(system.positions, system.charges,
                                     batch.kvecs, coeffs,
                                     batch.y_odd, batch.y_even)
    else:
        forces = kspace_force_kernel(system.positions, system.charges,
                                     batch.kvecs, coeffs)
    _, f_ibc = ibc_energy_force(system, spec)
    return forces + f_ibc


def rbe_energy_fourier(system: ParticleSystem,
                       spec: DielectricSpec | None,
                       alpha: float, batch: KBatch) -> float:
    """Stochastic estimate of the reciprocal-minus-self energy.

    Same importance sampling as the force estimator: the batch average of
    ``(S/P) (2 pi / V k^2) Re(rho_k conj(rho_bar_k))`` over full-space
    draws is an unbiased estimate of the Gaussian-weighted reciprocal sum;
    the self energy is subtracted deterministically so the result fills
    the same slot as the deterministic reciprocal term.  An exhaustive
    batch reproduces that deterministic value exactly.
    """
    system.require_neutral()
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    geometry = system.geometry
    kvecs = batch.kvecs
    k2 = np.einsum("ij,ij->i", kvecs, kvecs)
    use_images = spec is not None and _uses_images(spec)
    rho, rho_ref, _, _ = _rho_pair(system.positions, system.charges,
                                   kvecs, use_images)
    if use_images:
        y_odd, y_even = y_coefficients(kvecs[:, 2], spec, geometry.h)
        mode_u = (rho * np.conj((1.0 + y_even) * rho + y_odd * rho_ref)).real
    else:
        mode_u = rho.real**2 + rho.imag**2
    base = (2.0 * math.pi / geometry.volume) / k2
    if batch.weights is not None:
        u_k = float(np.sum(base * batch.weights * mode_u))
    else:
        u_k = (batch.s / len(batch)) * float(np.sum(base * mode_u))
    u_self = alpha / math.sqrt(math.pi) * float(np.sum(system.charges**2))
    return u_k - u_self


# ---------------------------------------------------------------------------
# variance diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceReport:
    """Per-particle variance of the stochastic k-space force.

    ``analytic`` evaluates the closed form

        Var_i = (1/P) [ S sum'_k e^{-k^2/4a^2} |g_i(k)|^2  -  |F_i|^2 ]

    (``g_i``: single-mode force contribution, ``F_i``: deterministic
    reciprocal force), summed over the full truncated mode set.
    ``empirical`` is the mean of |F~_i - F_i|^2 over ``n_samples`` batches.
    Both are traces over the three components, shape (N,).
    ``mean_residual_max`` is the max-norm of the ensemble-averaged residual
    (a bias indicator that should shrink like 1/sqrt(n_samples P)).
    """

    batch_size: int
    n_samples: int
    analytic: np.ndarray
    empirical: np.ndarray
    mean_residual_max: float

    @property
    def ratio(self) -> np.ndarray:
        return self.empirical / self.analytic


def _deterministic_reference(system, spec, alpha, k_max):
    from .fourier import dielectric_fourier_force, fourier3d_force

    if _uses_images(spec):
        return dielectric_fourier_force(system, spec, alpha, k_max)
    return fourier3d_force(system, alpha, k_max)


def _analytic_variance(system, spec, alpha, k_max, batch_size, f_det):
    geometry = system.geometry
    volume = geometry.volume
    pos, q = system.positions, system.charges
    _, kvecs = mode_table(geometry, k_max, half=True)
    k2 = np.einsum("ij,ij->i", kvecs, kvecs)
    gauss = np.exp(-k2 / (4.0 * alpha * alpha))
    scale = 2.0 * math.pi / volume
    use_images = _uses_images(spec)
    if use_images:
        y_odd, y_even = y_coefficients(kvecs[:, 2], spec, geometry.h)
    second_moment = np.zeros(system.n)
    block = max(1, 2_000_000 // max(system.n, 1))
    for lo in range(0, len(kvecs), block):
        hi = min(lo + block, len(kvecs))
        kb, k2b, gb = kvecs[lo:hi], k2[lo:hi], gauss[lo:hi]
        phase = pos @ kb.T
        ew = np.exp(1j * phase)
        rho = q @ ew
        if not use_images:
            im_xy = im_z = -2.0 * (np.conj(ew) * rho).imag
        else:
            ew_ref = np.exp(1j * (phase - 2.0 * pos[:, 2:3] * kb[:, 2][None, :]))
            rho_ref = q @ ew_ref
            yo, ye = y_odd[lo:hi], y_even[lo:hi]
            rho_bar = np.conj((1.0 + ye) * rho + yo * rho_ref)
            a_term = ew * rho_bar
            b_term = (1.0 + np.conj(ye)) * (np.conj(ew) * rho)
            c_term = np.conj(yo) * (np.conj(ew_ref) * rho)
            im_xy = (a_term - b_term - c_term).imag
            im_z = (a_term - b_term + c_term).imag
        # |g_i(k)|^2 summed with Gaussian weight; factor 2 for the -k twins
        cxy = (scale / k2b) ** 2 * gb * (kb[:, 0] ** 2 + kb[:, 1] ** 2)
        cz = (scale / k2b) ** 2 * gb * kb[:, 2] ** 2
        second_moment += (im_xy**2) @ (2.0 * cxy) + (im_z**2) @ (2.0 * cz)
    second_moment *= q * q
    s = normalization_s(system.geometry, alpha)
    return (s * second_moment - np.sum(f_det * f_det, axis=1)) / batch_size


def variance_report(system: ParticleSystem, spec: DielectricSpec | None,
                    alpha: float, batch_size: int, n_samples: int,
                    rng: RngHandle | np.random.Generator,
                    k_max: int | None = None) -> VarianceReport:
    """Empirical vs analytic variance of the batch force estimator.

    Runs ``n_samples`` batches from a persistent sampler, accumulating the
    residual against the deterministic reciprocal force (dipole term
    excluded on both sides -- it is deterministic and cancels), and
    evaluates the closed-form variance over the full truncated mode set.
    ``k_max`` defaults to a 1e-10 mode cutoff for the deterministic
    reference.
    """
    from .fourier import mode_cutoff

    if n_samples < 100:
        raise ValidationError(
            f"n_samples must be >= 100 for a usable estimate, got {n_samples}")
    if k_max is None:
        k_max = mode_cutoff(system.geometry, alpha, 1e-10)
    f_det = _deterministic_reference(system, spec, alpha, k_max)
    analytic = _analytic_variance(system, spec, alpha, k_max, batch_size, f_det)

    use_images = _uses_images(spec)
    sampler = ModeSampler(system.geometry, alpha, batch_size, rng)
    coeff_scale = 2.0 * math.pi / system.geometry.volume
    sq_sum = np.zeros(system.n)
    mean_residual = np.zeros((system.n, 3))
    for _ in range(n_samples):
        batch = sampler.sample_batch()
        k2 = np.einsum("ij,ij->i", batch.kvecs, batch.kvecs)
        coeffs = (batch.s / batch_size) * coeff_scale / k2
        if use_images:
            batch = precompute_y(batch, spec, system.geometry.h)
            forces = kspace_force_kernel(system.positions, system.charges,
                                         batch.kvecs, coeffs,
                                         batch.y_odd, batch.y_even)
        else:
            forces = kspace_force_kernel(system.positions, system.charges,
                                         batch.kvecs, coeffs)
        residual = forces - f_det
        sq_sum += np.sum(residual * residual, axis=1)
        mean_residual += residual
    mean_residual /= n_samples
    return VarianceReport(
        batch_size=batch_size,
        n_samples=n_samples,
        analytic=analytic,
        empirical=sq_sum / n_samples,
        mean_residual_max=float(np.max(np.abs(mean_residual))),
    )
