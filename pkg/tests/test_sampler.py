"""Tests for the random-batch reciprocal force estimators."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from slabewald.core import (
    STREAM_SAMPLER,
    DielectricSpec,
    ParticleSystem,
    RngHandle,
    SlabGeometry,
    StabilityError,
    ValidationError,
    image_series,
)
from slabewald.fourier import (
    dielectric_fourier_force,
    fourier3d_force,
    ibc_energy_force,
)
from slabewald.sampler import (
    KBatch,
    ModeSampler,
    VarianceReport,
    exhaustive_batch,
    normalization_s,
    precompute_y,
    rbe_energy_fourier,
    rbe_force_dielectric,
    rbe_force_homogeneous,
    sample_batch,
    variance_report,
)

GEOM = SlabGeometry(10.0, 10.0, 2.0, lz=10.0)
ASYM_SPEC = DielectricSpec(1.0, 1.0 / 9.0, 1.0 / 3.0, n_levels=3)


def random_neutral(seed, n, geometry, margin=0.2):
    rng = np.random.default_rng(seed)
    lo = [0.0, 0.0, margin]
    hi = [geometry.lx, geometry.ly, geometry.h - margin]
    positions = rng.uniform(lo, hi, size=(n, 3))
    charges = np.repeat([1.0, -1.0], n // 2)
    return ParticleSystem(geometry, positions, charges)


def handle(seed):
    return RngHandle(seed, STREAM_SAMPLER)


# ---------------------------------------------------------------------------
# normalization constant
# ---------------------------------------------------------------------------

class TestNormalization:
    def test_cubic_box_value(self):
        # 10x10x10 cell, alpha = 1: converged lattice sum
        geom = SlabGeometry(10.0, 10.0, 3.0, lz=10.0)
        s = normalization_s(geom, 1.0)
        assert s == pytest.approx(178.5871221251666, rel=1e-12)

    def test_gaussian_bound_formula(self):
        geom = SlabGeometry(10.0, 10.0, 3.0, lz=10.0)
        bound = normalization_s(geom, 1.0, "gaussian-bound")
        assert bound == pytest.approx(1000.0 / math.pi**1.5, rel=1e-14)

    def test_direct_triple_loop_sum(self):
        geom = SlabGeometry(10.0, 10.0, 3.0, lz=10.0)
        ns = np.arange(-20, 21)
        nx, ny, nz = np.meshgrid(ns, ns, ns, indexing="ij")
        k2 = ((2.0 * np.pi * nx / geom.lx) ** 2
              + (2.0 * np.pi * ny / geom.ly) ** 2
              + (2.0 * np.pi * nz / geom.lz) ** 2)
        brute = np.exp(-k2 / 4.0).sum() - 1.0  # drop the zero mode
        assert normalization_s(geom, 1.0) == pytest.approx(brute, rel=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(
        alpha=st.floats(0.2, 3.0),
        lx=st.floats(3.0, 20.0),
        ly=st.floats(3.0, 20.0),
        lz=st.floats(3.0, 30.0),
    )
    def test_poisson_dual_identity(self, alpha, lx, ly, lz):
        # Poisson summation turns each axis factor into the continuum value
        # times a dual theta sum:  S + 1 = (a^3 V / pi^1.5) prod_d
        # sum_m exp(-(a L_d m)^2).  Holds for every alpha, so it pins the
        # lattice sum across regimes the estimators never visit.
        geom = SlabGeometry(lx, ly, 2.0, lz=max(lz, 2.5))
        exact = normalization_s(geom, alpha)
        bound = normalization_s(geom, alpha, "gaussian-bound")
        dual = 1.0
        ms = np.arange(-60, 61)
        for dim in (geom.lx, geom.ly, geom.lz):
            dual *= np.exp(-((alpha * dim * ms) ** 2)).sum()
        assert exact + 1.0 == pytest.approx(bound * dual, rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(
        alpha=st.floats(0.5, 2.0),
        lx=st.floats(6.0, 15.0),
        ly=st.floats(6.0, 15.0),
        lz=st.floats(6.0, 15.0),
    )
    def test_exact_below_gaussian_bound(self, alpha, lx, ly, lz):
        # the continuum estimate dominates once the Gaussian spans a few
        # lattice spacings per axis (alpha L >= 3: its validity regime)
        geom = SlabGeometry(max(lx, 3.0 / alpha), max(ly, 3.0 / alpha), 2.0,
                            lz=max(lz, 3.0 / alpha))
        exact = normalization_s(geom, alpha)
        bound = normalization_s(geom, alpha, "gaussian-bound")
        assert 0.0 <= exact <= bound * (1.0 + 1e-12)

    def test_bound_is_asymptotic_only(self):
        # Poisson summation: each axis factor exceeds its continuum value by
        # ~ 2 e^{-(alpha L)^2}, so a narrow Gaussian (alpha L ~ 1) pushes the
        # lattice sum above the continuum estimate.  Diagnostic consumers
        # must not treat the bound as exact outside the operating regime.
        geom = SlabGeometry(4.0, 4.0, 2.0, lz=12.0)
        exact = normalization_s(geom, 0.3125)
        bound = normalization_s(geom, 0.3125, "gaussian-bound")
        assert exact > bound

    def test_vanishes_for_small_alpha(self):
        # every nonzero mode is suppressed when the Gaussian is very narrow
        assert normalization_s(GEOM, 0.01) < 1e-100

    def test_validation(self):
        with pytest.raises(ValidationError):
            normalization_s(GEOM, -1.0)
        with pytest.raises(ValidationError):
            normalization_s(GEOM, 1.0, "typo")
        with pytest.raises(ValidationError):
            normalization_s(SlabGeometry(10.0, 10.0, 2.0), 1.0)


# ---------------------------------------------------------------------------
# batches and the sampler
# ---------------------------------------------------------------------------

class TestKBatch:
    def test_rejects_zero_mode(self):
        ints = np.array([[1, 0, 0], [0, 0, 0]])
        kvecs = 2.0 * math.pi * ints / 10.0
        with pytest.raises(ValidationError):
            KBatch(ints=ints, kvecs=kvecs, s=1.0)

    def test_rejects_bad_shapes_and_s(self):
        ints = np.array([[1, 0, 0]])
        kvecs = 2.0 * math.pi * ints / 10.0
        with pytest.raises(ValidationError):
            KBatch(ints=ints, kvecs=kvecs[:, :2], s=1.0)
        with pytest.raises(ValidationError):
            KBatch(ints=ints, kvecs=kvecs, s=0.0)

    def test_modes_property(self):
        batch = sample_batch(8, GEOM, 1.0, handle(1))
        modes = batch.modes(GEOM)
        assert len(modes) == len(batch) == 8
        for mode, ints, kvec in zip(modes, batch.ints, batch.kvecs):
            assert (mode.nx, mode.ny, mode.nz) == tuple(ints)
            np.testing.assert_allclose(mode.k, kvec, rtol=1e-15)


class TestModeSampler:
    def test_deterministic_under_equal_seeds(self):
        a = ModeSampler(GEOM, 1.0, 40, handle(5))
        b = ModeSampler(GEOM, 1.0, 40, handle(5))
        for _ in range(5):
            np.testing.assert_array_equal(
                a.sample_batch().ints, b.sample_batch().ints)

    def test_zero_mode_never_sampled(self):
        sampler = ModeSampler(GEOM, 0.4, 64, handle(3))
        for _ in range(100):
            batch = sampler.sample_batch()
            assert not np.any(np.all(batch.ints == 0, axis=1))

    def test_chain_persists_between_batches(self):
        sampler = ModeSampler(GEOM, 1.0, 64, handle(4))
        first = sampler.sample_batch().ints
        second = sampler.sample_batch().ints
        assert not np.array_equal(first, second)

    def test_proposal_width_tracks_cell(self):
        sampler = ModeSampler(SlabGeometry(10.0, 8.0, 2.0, lz=12.0), 1.0,
                              8, handle(1))
        np.testing.assert_array_equal(sampler._sigma, [3.0, 3.0, 4.0])
        tiny = ModeSampler(SlabGeometry(4.0, 4.0, 2.0, lz=4.5), 0.2,
                           8, handle(1))
        np.testing.assert_array_equal(tiny._sigma, [1.0, 1.0, 1.0])

    def test_validation(self):
        with pytest.raises(ValidationError):
            ModeSampler(GEOM, 1.0, 0, handle(1))
        with pytest.raises(ValidationError):
            ModeSampler(GEOM, -0.5, 8, handle(1))
        with pytest.raises(ValidationError):
            ModeSampler(GEOM, 1.0, 8, handle(1), thin=0)

    def test_marginal_distribution_chi_square(self):
        # 1e6 draws of n_x against the exact lattice marginal (zero-triple
        # state removed).  Thinned sweeps between batches keep successive
        # draws close enough to independent for the chi-square statistic.
        geom = SlabGeometry(10.0, 8.0, 2.0, lz=12.0)
        alpha = 1.0
        sampler = ModeSampler(geom, alpha, 1000, handle(42), thin=8)
        draws = np.concatenate(
            [sampler.sample_batch().ints[:, 0] for _ in range(1000)])
        assert 0.15 < sampler.acceptance_rate < 0.7

        nmax = 30
        ns = np.arange(-nmax, nmax + 1)
        weights = [np.exp(-(2.0 * np.pi * ns / dim) ** 2 / (4.0 * alpha**2))
                   for dim in (geom.lx, geom.ly, geom.lz)]
        marginal = weights[0] * weights[1].sum() * weights[2].sum()
        marginal[ns == 0] -= 1.0  # the excluded (0,0,0) state has weight 1
        probs = marginal / marginal.sum()

        lo, hi = -6, 6
        f_exp = np.empty(hi - lo + 3)
        f_obs = np.empty(hi - lo + 3)
        for idx, value in enumerate(range(lo, hi + 1)):
            f_exp[idx + 1] = probs[ns == value][0] * draws.size
            f_obs[idx + 1] = np.count_nonzero(draws == value)
        f_exp[0] = probs[ns < lo].sum() * draws.size
        f_obs[0] = np.count_nonzero(draws < lo)
        f_exp[-1] = probs[ns > hi].sum() * draws.size
        f_obs[-1] = np.count_nonzero(draws > hi)
        keep = f_exp >= 10
        _, p_value = stats.chisquare(
            f_obs[keep], f_exp[keep] * f_obs[keep].sum() / f_exp[keep].sum())
        assert p_value > 0.01


# ---------------------------------------------------------------------------
# force estimators
# ---------------------------------------------------------------------------

class TestExhaustiveReduction:
    def test_homogeneous_matches_deterministic(self):
        system = random_neutral(3, 12, GEOM)
        batch = exhaustive_batch(GEOM, 1.0, 8)
        f_batch = rbe_force_homogeneous(system, 1.0, batch)
        f_det = fourier3d_force(system, 1.0, 8) + ibc_energy_force(system)[1]
        scale = np.max(np.abs(f_det))
        np.testing.assert_allclose(f_batch, f_det, atol=1e-12 * scale)

    def test_dielectric_matches_deterministic(self):
        system = random_neutral(3, 12, GEOM)
        batch = precompute_y(exhaustive_batch(GEOM, 1.0, 8), ASYM_SPEC, GEOM.h)
        f_batch = rbe_force_dielectric(system, ASYM_SPEC, 1.0, batch)
        f_det = (dielectric_fourier_force(system, ASYM_SPEC, 1.0, 8)
                 + ibc_energy_force(system, ASYM_SPEC)[1])
        scale = np.max(np.abs(f_det))
        np.testing.assert_allclose(f_batch, f_det, atol=1e-12 * scale)

    def test_literal_flag_rejected_on_weighted_batch(self):
        system = random_neutral(3, 12, GEOM)
        batch = exhaustive_batch(GEOM, 1.0, 6)
        with pytest.raises(ValidationError):
            rbe_force_homogeneous(system, 1.0, batch,
                                  literal_gaussian_weight=True)


class TestDirectDoubleSum:
    def test_decoupled_kernel_matches_explicit_image_sum(self):
        # Independent evaluation of the same estimator: per sampled mode,
        # explicit j-sum for the structure factor and explicit (j, level)
        # double loop for the image-extended conjugate factor, carrying the
        # level-reflected wavevector (kx, ky, (-1)^l kz).  The production
        # path never enumerates images per particle, so agreement pins the
        # phase-coefficient decoupling.
        geom = SlabGeometry(9.0, 11.0, 1.5, lz=14.0)
        rng = np.random.default_rng(8)
        pos = rng.uniform([0, 0, 0.1], [9, 11, 1.4], size=(20, 3))
        charges = np.repeat([1.0, -1.0], 10)
        system = ParticleSystem(geom, pos, charges)
        spec = DielectricSpec(1.0, 1.0 / 9.0, 1.0 / 3.0, n_levels=6)
        batch = precompute_y(
            sample_batch(24, geom, 1.0, handle(17)), spec, geom.h)

        f_fast = (rbe_force_dielectric(system, spec, 1.0, batch)
                  - ibc_energy_force(system, spec)[1])
        f_direct = self._direct(system, spec, batch)
        scale = np.max(np.abs(f_direct))
        np.testing.assert_allclose(f_fast, f_direct, atol=1e-12 * scale)

    @staticmethod
    def _direct(system, spec, batch):
        geom = system.geometry
        pos, q = system.positions, system.charges
        series = image_series(spec, geom.h)
        signs = [-1.0 if level % 2 else 1.0 for level in series.levels]
        forces = np.zeros((system.n, 3))
        for kvec in batch.kvecs:
            k2 = float(kvec @ kvec)
            coeff = (batch.s / len(batch)) * (2.0 * math.pi
                                              / geom.volume) / k2
            rho = np.sum(q * np.exp(1j * (pos @ kvec)))
            rho_bar = np.conj(rho)
            for sign, fac, off in zip(signs, series.factors, series.offsets):
                z_img = sign * pos[:, 2] + off
                phase = pos[:, 0] * kvec[0] + pos[:, 1] * kvec[1] + z_img * kvec[2]
                rho_bar += fac * np.conj(np.sum(q * np.exp(1j * phase)))
            for i in range(system.n):
                e_i = np.exp(1j * (pos[i] @ kvec))
                grad = kvec * np.conj(e_i)
                for sign, fac, off in zip(signs, series.factors,
                                          series.offsets):
                    k_level = np.array([kvec[0], kvec[1], sign * kvec[2]])
                    z_img = sign * pos[i, 2] + off
                    phase = (pos[i, 0] * kvec[0] + pos[i, 1] * kvec[1]
                             + z_img * kvec[2])
                    grad = grad + fac * k_level * np.exp(-1j * phase)
                forces[i] += coeff * q[i] * (
                    kvec * (e_i * rho_bar).imag - (grad * rho).imag)
        return forces


class TestEstimatorProperties:
    def test_no_image_levels_reduces_bitwise(self):
        system = random_neutral(3, 12, GEOM)
        batch = sample_batch(32, GEOM, 1.0, handle(2))
        plain = rbe_force_homogeneous(system, 1.0, batch)
        for spec in (DielectricSpec(1.0, 1.0, 1.0, n_levels=0),
                     DielectricSpec(1.0, 1.0, 1.0, n_levels=4)):
            ready = precompute_y(batch, spec, GEOM.h)
            walled = rbe_force_dielectric(system, spec, 1.0, ready)
            np.testing.assert_array_equal(walled, plain)

    def test_missing_y_coefficients_rejected(self):
        system = random_neutral(3, 12, GEOM)
        batch = sample_batch(16, GEOM, 1.0, handle(2))
        with pytest.raises(ValidationError):
            rbe_force_dielectric(system, ASYM_SPEC, 1.0, batch)

    def test_stability_guard(self):
        cramped = SlabGeometry(10.0, 10.0, 2.0, lz=7.0)
        system = random_neutral(3, 12, cramped)
        batch = precompute_y(
            sample_batch(16, cramped, 1.0, handle(2)), ASYM_SPEC, cramped.h)
        with pytest.raises(StabilityError):
            rbe_force_dielectric(system, ASYM_SPEC, 1.0, batch)
        f = rbe_force_dielectric(system, ASYM_SPEC, 1.0, batch,
                                 check_stability=False)
        assert np.all(np.isfinite(f))

    def test_net_force_vanishes_every_batch(self):
        pair = ParticleSystem(
            GEOM,
            np.array([[2.0, 3.0, 0.5], [7.0, 4.5, 1.5]]),
            np.array([1.0, -1.0]),
        )
        many = random_neutral(3, 12, GEOM)
        sampler = ModeSampler(GEOM, 1.0, 32, handle(9))
        for _ in range(50):
            batch = sampler.sample_batch()
            for system in (pair, many):
                f = rbe_force_homogeneous(system, 1.0, batch)
                net = np.abs(f.sum(axis=0)).max()
                assert net <= 1e-13 * np.abs(f).max()

    def test_literal_gaussian_weight_shrinks_contributions(self):
        system = random_neutral(3, 12, GEOM)
        batch = sample_batch(32, GEOM, 1.0, handle(2))
        standard = rbe_force_homogeneous(system, 1.0, batch)
        literal = rbe_force_homogeneous(system, 1.0, batch,
                                        literal_gaussian_weight=True)
        assert np.max(np.abs(standard - literal)) > 1e-8
        f_ibc = ibc_energy_force(system)[1]
        assert (np.abs(literal - f_ibc).sum()
                < np.abs(standard - f_ibc).sum())

    def test_charged_system_rejected(self):
        system = ParticleSystem(
            GEOM, np.array([[1.0, 1.0, 1.0]]), np.array([1.0]))
        batch = sample_batch(8, GEOM, 1.0, handle(1))
        with pytest.raises(ValidationError):
            rbe_force_homogeneous(system, 1.0, batch)


def _ensemble_mean_z(system, spec, sampler, reference,
                     n_blocks=40, block=100):
    """Max per-particle z-score of the ensemble mean against a reference.

    Successive batches from a persistent chain are correlated, so the
    standard error comes from the scatter of block means (batch-means
    estimator) rather than the naive per-batch variance.
    """
    blocks = np.zeros((n_blocks, system.n, 3))
    for b in range(n_blocks):
        acc = np.zeros((system.n, 3))
        for _ in range(block):
            batch = sampler.sample_batch()
            if spec is None:
                acc += rbe_force_homogeneous(system, 1.0, batch)
            else:
                batch = precompute_y(batch, spec, system.geometry.h)
                acc += rbe_force_dielectric(system, spec, 1.0, batch)
        blocks[b] = acc / block
    mean = blocks.mean(axis=0)
    se_component = blocks.std(axis=0, ddof=1) / math.sqrt(n_blocks)
    deviation = np.linalg.norm(mean - reference, axis=1)
    se = np.sqrt((se_component**2).sum(axis=1))
    return float(np.max(deviation / se))


class TestUnbiasedness:
    def test_homogeneous_mean_approaches_deterministic(self):
        system = random_neutral(3, 12, GEOM)
        sampler = ModeSampler(GEOM, 1.0, 48, handle(11))
        reference = (fourier3d_force(system, 1.0, 14)
                     + ibc_energy_force(system)[1])
        assert _ensemble_mean_z(system, None, sampler, reference) <= 3.0

    def test_dielectric_mean_approaches_deterministic(self):
        system = random_neutral(5, 12, GEOM)
        spec = DielectricSpec.symmetric(0.6, n_levels=3)
        sampler = ModeSampler(GEOM, 1.0, 48, handle(13))
        reference = (dielectric_fourier_force(system, spec, 1.0, 14)
                     + ibc_energy_force(system, spec)[1])
        assert _ensemble_mean_z(system, spec, sampler, reference) <= 3.0


# ---------------------------------------------------------------------------
# image phase coefficients
# ---------------------------------------------------------------------------

class TestPrecomputeY:
    def test_commensurate_phase_values(self):
        # kz = pi / h makes every image phase a multiple of pi: the odd sum
        # collapses to 2 (g + g^3) and the even sum to 2 (g^2 + g^4)
        spec = DielectricSpec.symmetric(0.9, n_levels=4)
        ints = np.array([[0, 0, 1]])
        kz = math.pi / GEOM.h
        batch = KBatch(ints=ints, kvecs=np.array([[0.0, 0.0, kz]]), s=1.0)
        ready = precompute_y(batch, spec, GEOM.h)
        assert ready.y_odd[0] == pytest.approx(2.0 * (0.9 + 0.9**3), rel=1e-12)
        assert ready.y_even[0] == pytest.approx(2.0 * (0.9**2 + 0.9**4), rel=1e-12)
        assert abs(ready.y_odd[0].imag) < 1e-12
        assert abs(ready.y_even[0].imag) < 1e-12

    def test_homogeneous_spec_gives_zeros(self):
        batch = sample_batch(16, GEOM, 1.0, handle(1))
        ready = precompute_y(batch, DielectricSpec(1.0, 1.0, 1.0, n_levels=5),
                             GEOM.h)
        np.testing.assert_array_equal(ready.y_odd, np.zeros(16, complex))
        np.testing.assert_array_equal(ready.y_even, np.zeros(16, complex))


# ---------------------------------------------------------------------------
# variance diagnostics
# ---------------------------------------------------------------------------

class TestVarianceReport:
    def test_empirical_matches_analytic_homogeneous(self):
        system = random_neutral(3, 12, GEOM)
        report = variance_report(system, None, 1.0, 48, 400, handle(5))
        assert isinstance(report, VarianceReport)
        assert report.batch_size == 48 and report.n_samples == 400
        assert np.all(report.ratio > 0.75) and np.all(report.ratio < 1.3)
        # ensemble-average residual is much smaller than a single batch's
        assert report.mean_residual_max < np.sqrt(report.analytic.max())

    def test_empirical_matches_analytic_dielectric(self):
        system = random_neutral(3, 12, GEOM)
        report = variance_report(system, ASYM_SPEC, 1.0, 48, 600, handle(6))
        assert np.all(report.ratio > 0.75) and np.all(report.ratio < 1.3)

    def test_doubling_batch_size_halves_analytic(self):
        system = random_neutral(3, 12, GEOM)
        single = variance_report(system, None, 1.0, 48, 100, handle(5))
        double = variance_report(system, None, 1.0, 96, 100, handle(5))
        np.testing.assert_allclose(double.analytic, single.analytic / 2.0,
                                   rtol=1e-14)

    def test_analytic_variance_independent_of_artificial_period(self):
        positions = random_neutral(3, 12, GEOM).positions
        charges = np.repeat([1.0, -1.0], 6)
        means = []
        for lz in (6.0, 12.0, 24.0):
            geom = SlabGeometry(10.0, 10.0, 2.0, lz=lz)
            system = ParticleSystem(geom, positions, charges)
            report = variance_report(system, None, 1.0, 48, 100, handle(4))
            means.append(report.analytic.mean())
        spread = (max(means) - min(means)) / min(means)
        assert spread < 0.05

    def test_small_sample_count_rejected(self):
        system = random_neutral(3, 12, GEOM)
        with pytest.raises(ValidationError):
            variance_report(system, None, 1.0, 48, 50, handle(5))


class TestEnergyEstimator:
    def test_exhaustive_batch_reproduces_deterministic_energy(self):
        from slabewald.fourier import (
            dielectric_fourier_energy,
            fourier3d_energy,
            mode_cutoff,
        )
        system = random_neutral(3, 20, GEOM)
        k_max = mode_cutoff(GEOM, 1.0, 1e-10)
        batch = exhaustive_batch(GEOM, 1.0, k_max)
        det = fourier3d_energy(system, 1.0, k_max)
        est = rbe_energy_fourier(system, None, 1.0, batch)
        assert est == pytest.approx(det, rel=1e-12)
        spec = DielectricSpec.symmetric(0.6, n_levels=3)
        det_d = dielectric_fourier_energy(system, spec, 1.0, k_max)
        est_d = rbe_energy_fourier(system, spec, 1.0, batch)
        assert est_d == pytest.approx(det_d, rel=1e-12)

    def test_sampled_mean_is_unbiased(self):
        from slabewald.fourier import fourier3d_energy, mode_cutoff
        system = random_neutral(3, 20, GEOM)
        det = fourier3d_energy(system, 1.0, mode_cutoff(GEOM, 1.0, 1e-10))
        sampler = ModeSampler(GEOM, 1.0, 64, handle(5))
        n_blocks, block = 30, 100
        block_means = np.empty(n_blocks)
        for b in range(n_blocks):
            vals = [rbe_energy_fourier(system, None, 1.0,
                                       sampler.sample_batch())
                    for _ in range(block)]
            block_means[b] = np.mean(vals)
        se = block_means.std(ddof=1) / math.sqrt(n_blocks)
        assert abs(block_means.mean() - det) <= 3.0 * se
