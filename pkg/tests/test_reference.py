import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slabewald.core import (
    DielectricSpec,
    ParticleSystem,
    SingularityError,
    SlabGeometry,
    ValidationError,
)
from slabewald.reference import (
    Ewald2DParams,
    dielectric_reference_energy,
    energy_fourier_2d,
    energy_real_2d,
    force_fd_oracle,
    fourier_kernel,
    total_energy_2d,
    zero_mode_energy,
)


def random_neutral_system(seed, n=12, lx=10.0, ly=12.0, h=6.0, margin=0.5):
    rng = np.random.default_rng(seed)
    pos = np.column_stack([
        rng.uniform(0, lx, n),
        rng.uniform(0, ly, n),
        rng.uniform(margin, h - margin, n),
    ])
    q = np.repeat([1.0, -1.0], n // 2)
    return ParticleSystem(SlabGeometry(lx, ly, h), pos, q)


# ---------------------------------------------------------------------------
# real-space part
# ---------------------------------------------------------------------------

def test_single_charge_real_part_vanishes():
    # Only periodic self-replicas contribute; erfc(alpha L) kills them.
    g = SlabGeometry(10.0, 10.0, 5.0)
    s = ParticleSystem(g, np.array([[1.0, 1.0, 2.5]]), np.array([1.0]))
    u = energy_real_2d(s, Ewald2DParams(alpha=1.0, real_shells=3))
    assert abs(u) < 1e-30


def test_isolated_pair_real_part_vanishes():
    # Separation far below the box size with alpha d >> 6: every erfc
    # argument is huge, so even the direct pair term is negligible.
    g = SlabGeometry(50.0, 50.0, 10.0)
    s = ParticleSystem(g, np.array([[0.0, 0.0, 5.0], [2.0, 0.0, 5.0]]),
                       np.array([1.0, -1.0]))
    u = energy_real_2d(s, Ewald2DParams(alpha=4.0, real_shells=2))
    assert abs(u) < 1e-25


def test_pair_real_value_frozen():
    # +-1 pair at in-plane distance 1, alpha=1, three replica shells.
    # Value frozen from an independent brute-force evaluation.
    g = SlabGeometry(10.0, 10.0, 5.0)
    s = ParticleSystem(g, np.array([[0.0, 0.0, 2.5], [1.0, 0.0, 2.5]]),
                       np.array([1.0, -1.0]))
    u = energy_real_2d(s, Ewald2DParams(alpha=1.0, real_shells=3))
    assert u == pytest.approx(-0.15729920705028513, rel=1e-13)


def test_coincident_charges_raise():
    g = SlabGeometry(10.0, 10.0, 5.0)
    s = ParticleSystem(g, np.array([[1.0, 1.0, 2.5], [1.0, 1.0, 2.5]]),
                       np.array([1.0, -1.0]))
    with pytest.raises(SingularityError):
        energy_real_2d(s, Ewald2DParams(alpha=1.0))


# ---------------------------------------------------------------------------
# reciprocal part
# ---------------------------------------------------------------------------

def test_fourier_value_frozen():
    # Frozen from an mpmath quadrature of the kernel's integral form
    # (independent of the erfc-based closed form used in the implementation).
    g = SlabGeometry(8.0, 8.0, 4.0)
    s = ParticleSystem(g, np.array([[0.0, 0.0, 1.0], [0.7, 0.3, 3.0]]),
                       np.array([1.0, -1.0]))
    u = energy_fourier_2d(s, Ewald2DParams(alpha=0.8, h_max=20))
    assert u == pytest.approx(-0.4278435051631905, rel=1e-13)


def test_zero_mode_value_frozen():
    g = SlabGeometry(8.0, 8.0, 4.0)
    s = ParticleSystem(g, np.array([[0.0, 0.0, 1.0], [0.7, 0.3, 3.0]]),
                       np.array([1.0, -1.0]))
    assert zero_mode_energy(s, 0.8) == pytest.approx(0.12782138623133398, rel=1e-13)


def test_coplanar_zero_mode_vanishes():
    # All charges at one height: the zero-mode bracket is pair-independent
    # and the neutral double sum collapses to (sum q)^2 times a constant.
    rng = np.random.default_rng(5)
    g = SlabGeometry(10.0, 10.0, 5.0)
    pos = np.column_stack([rng.uniform(0, 10, 8), rng.uniform(0, 10, 8),
                           np.full(8, 2.5)])
    q = np.repeat([1.0, -1.0], 4)
    s = ParticleSystem(g, pos, q)
    assert abs(zero_mode_energy(s, 1.3)) < 1e-14


def test_fourier_kernel_matches_textbook_form_at_moderate_args():
    from scipy.special import erfc
    alpha = 0.8
    for h in (0.3, 1.0, 2.5):
        for z in (0.0, 0.7, -1.5):
            direct = (math.exp(h * z) * erfc(h / (2 * alpha) + alpha * z)
                      + math.exp(-h * z) * erfc(h / (2 * alpha) - alpha * z))
            assert fourier_kernel(h, z, alpha) == pytest.approx(direct, rel=1e-14)


def test_fourier_kernel_extreme_arguments_stay_finite():
    # Regime where e^{hz} alone overflows: h z ~ 1e7.
    vals = fourier_kernel(np.array([1e4, 1e-8, 50.0]),
                          np.array([1e3, 1e3, 40.0]), 0.5)
    assert np.all(np.isfinite(vals))
    assert np.all(vals >= 0.0)
    assert np.all(vals <= 2.0 + 1e-12)
    # tiny h with large z approaches 2 e^{-h z}
    assert vals[1] == pytest.approx(2.0 * math.exp(-1e-8 * 1e3), rel=1e-10)


def test_neutrality_required_for_fourier_and_total():
    g = SlabGeometry(10.0, 10.0, 5.0)
    s = ParticleSystem(g, np.array([[1.0, 1.0, 2.5]]), np.array([1.0]))
    with pytest.raises(ValidationError):
        energy_fourier_2d(s, Ewald2DParams(alpha=1.0))
    with pytest.raises(ValidationError):
        total_energy_2d(s, Ewald2DParams(alpha=1.0))


# ---------------------------------------------------------------------------
# combined total
# ---------------------------------------------------------------------------

def test_permutation_invariance_is_bitwise():
    s = random_neutral_system(2)
    rng = np.random.default_rng(9)
    perm = rng.permutation(s.n)
    s2 = ParticleSystem(s.geometry, s.positions[perm], s.charges[perm])
    p = Ewald2DParams(alpha=0.9, real_shells=2, h_max=12)
    assert energy_real_2d(s, p) == energy_real_2d(s2, p)
    assert energy_fourier_2d(s, p) == energy_fourier_2d(s2, p)
    assert total_energy_2d(s, p).total == total_energy_2d(s2, p).total


def test_alpha_invariance():
    s = random_neutral_system(7)
    g = s.geometry
    u1 = total_energy_2d(s, Ewald2DParams.for_tolerance(0.6, g, 1e-12)).total
    u2 = total_energy_2d(s, Ewald2DParams.for_tolerance(1.2, g, 1e-12)).total
    assert abs(u1 - u2) <= 1e-8 * max(1.0, abs(u1))


@given(lam=st.floats(0.1, 4.0, allow_nan=False))
@settings(max_examples=20, deadline=None)
def test_charge_scaling_is_quadratic(lam):
    s = random_neutral_system(3, n=6)
    p = Ewald2DParams(alpha=1.0, real_shells=2, h_max=8)
    base = total_energy_2d(s, p).total
    scaled = ParticleSystem(s.geometry, s.positions, lam * s.charges)
    assert total_energy_2d(scaled, p).total == pytest.approx(lam * lam * base,
                                                             rel=1e-12)


def test_charge_doubling_quadruples_exactly():
    s = random_neutral_system(4, n=8)
    p = Ewald2DParams(alpha=1.0, real_shells=2, h_max=8)
    u1 = total_energy_2d(s, p).total
    s2 = ParticleSystem(s.geometry, s.positions, 2.0 * s.charges)
    assert total_energy_2d(s2, p).total == pytest.approx(4.0 * u1, rel=1e-15)


def test_against_direct_lattice_sum():
    # Dipole-free 16-particle configuration (quartets sharing xy columns):
    # the bare 1/r lattice sum then converges fast enough to resolve 1e-4.
    rng = np.random.default_rng(11)
    lx = ly = 8.0
    pos, q = [], []
    for _ in range(4):
        x1, y1, x2, y2 = rng.uniform(0, 8, 4)
        z1, z2 = rng.uniform(0.5, 3.5, 2)
        pos += [(x1, y1, z1), (x1, y1, z2), (x2, y2, z1), (x2, y2, z2)]
        q += [1.0, -1.0, -1.0, 1.0]
    pos = np.asarray(pos)
    q = np.asarray(q)
    s = ParticleSystem(SlabGeometry(lx, ly, 4.0), pos, q)
    u = total_energy_2d(s, Ewald2DParams.for_tolerance(1.0, s.geometry, 1e-12)).total

    d = (s.positions[:, None, :] - s.positions[None, :, :]).reshape(-1, 3)
    qq = (q[:, None] * q[None, :]).ravel()
    diag = np.eye(16, dtype=bool).ravel()
    shells = 16   # (2*16+1)^2 ~ 1e3 replicas
    parts = []
    for nx in range(-shells, shells + 1):
        for ny in range(-shells, shells + 1):
            rx = d[:, 0] + nx * lx
            ry = d[:, 1] + ny * ly
            r = np.sqrt(rx * rx + ry * ry + d[:, 2] ** 2)
            t = np.where(diag & (nx == 0) & (ny == 0), 0.0,
                         qq / np.where(r > 0, r, 1.0))
            parts.append(t.sum())
    direct = 0.5 * math.fsum(parts)
    assert u == pytest.approx(direct, abs=1e-4)


def test_hmax_truncation_error_decreases_monotonically():
    s = random_neutral_system(6)
    vals = [energy_fourier_2d(s, Ewald2DParams(alpha=1.0, h_max=h))
            for h in (4, 8, 12, 16, 20)]
    diffs = [abs(vals[i] - vals[i + 1]) for i in range(len(vals) - 1)]
    assert all(diffs[i + 1] <= diffs[i] for i in range(len(diffs) - 1))


def test_for_tolerance_cutoffs_respond_to_tolerance():
    g = SlabGeometry(10.0, 10.0, 5.0)
    loose = Ewald2DParams.for_tolerance(1.0, g, 1e-6)
    tight = Ewald2DParams.for_tolerance(1.0, g, 1e-14)
    assert tight.h_max > loose.h_max
    assert tight.real_shells >= loose.real_shells
    with pytest.raises(ValidationError):
        Ewald2DParams.for_tolerance(1.0, g, 2.0)


def test_params_validation():
    with pytest.raises(ValidationError):
        Ewald2DParams(alpha=-1.0)
    with pytest.raises(ValidationError):
        Ewald2DParams(alpha=1.0, real_shells=-1)
    with pytest.raises(ValidationError):
        Ewald2DParams(alpha=1.0, h_max=0)


# ---------------------------------------------------------------------------
# finite-difference force oracle
# ---------------------------------------------------------------------------

def test_fd_rigid_translation_leaves_energy_and_net_force_zero():
    s = random_neutral_system(8, n=6)
    p = Ewald2DParams(alpha=1.0, real_shells=2, h_max=10)
    u = total_energy_2d(s, p).total
    shifted = s.with_positions(s.positions + np.array([1.3, -2.1, 0.4]))
    u2 = total_energy_2d(shifted, p).total
    assert u2 == pytest.approx(u, abs=1e-12 * max(1.0, abs(u)))
    f = force_fd_oracle(s, lambda sys_: total_energy_2d(sys_, p).total,
                        step=1e-5)
    assert np.linalg.norm(f.sum(axis=0)) < 1e-7


def test_fd_single_particle_zero_force():
    g = SlabGeometry(10.0, 10.0, 5.0)
    s = ParticleSystem(g, np.array([[1.0, 1.0, 2.5]]), np.array([1.0]))
    p = Ewald2DParams(alpha=1.0, real_shells=2)
    f = force_fd_oracle(s, lambda sys_: energy_real_2d(sys_, p), step=1e-5)
    assert np.max(np.abs(f)) < 1e-8


def test_fd_error_is_second_order_in_step():
    s = random_neutral_system(10, n=4)
    p = Ewald2DParams(alpha=1.0, real_shells=2, h_max=8)
    fn = lambda sys_: energy_real_2d(sys_, p)
    f_ref = force_fd_oracle(s, fn, step=1e-6)
    e_big = np.max(np.abs(force_fd_oracle(s, fn, step=8e-3) - f_ref))
    e_small = np.max(np.abs(force_fd_oracle(s, fn, step=4e-3) - f_ref))
    # halving the step should cut the error by ~4 (allow a generous band)
    assert 2.5 < e_big / e_small < 6.0


def test_fd_step_validation():
    s = random_neutral_system(1, n=4)
    with pytest.raises(ValidationError):
        force_fd_oracle(s, lambda sys_: 0.0, step=0.0)


# ---------------------------------------------------------------------------
# dielectric reference
# ---------------------------------------------------------------------------

def test_dielectric_gamma_zero_equals_homogeneous():
    s = random_neutral_system(12, n=8, lx=8.0, ly=8.0, h=4.0)
    p = Ewald2DParams(alpha=1.0, real_shells=2, h_max=12)
    u = dielectric_reference_energy(s, DielectricSpec.homogeneous(), p)
    assert u == total_energy_2d(s, p).total


def test_dielectric_mirror_symmetry():
    # Symmetric contrast: reflecting every z through the slab midplane is a
    # symmetry of the image construction.
    s = random_neutral_system(13, n=8, lx=8.0, ly=8.0, h=4.0)
    spec = DielectricSpec.symmetric(0.7, n_levels=8)
    p = Ewald2DParams.for_tolerance(1.0, s.geometry, 1e-12)
    mirrored = s.with_positions(
        np.column_stack([s.positions[:, 0], s.positions[:, 1],
                         4.0 - s.positions[:, 2]]))
    u1 = dielectric_reference_energy(s, spec, p)
    u2 = dielectric_reference_energy(mirrored, spec, p)
    assert u1 == pytest.approx(u2, rel=1e-10)


def test_dielectric_image_truncation_converged():
    # Strong contrast: M = 10 already sits on the converged plateau.
    s = random_neutral_system(3, n=8, lx=8.0, ly=8.0, h=4.0)
    p = Ewald2DParams.for_tolerance(1.0, s.geometry, 1e-12)
    spec10 = DielectricSpec.symmetric(0.939, n_levels=10)
    spec20 = DielectricSpec.symmetric(0.939, n_levels=20)
    u10 = dielectric_reference_energy(s, spec10, p)
    u20 = dielectric_reference_energy(s, spec20, p)
    assert u10 == pytest.approx(u20, abs=1e-10)


def test_dielectric_image_stack_numeric_range_guard():
    g = SlabGeometry(1.0, 1.0, 1e99)
    s = ParticleSystem(g, np.array([[0.5, 0.5, 4e98], [0.5, 0.4, 6e98]]),
                       np.array([1.0, -1.0]))
    spec = DielectricSpec.symmetric(0.5, n_levels=10)
    with pytest.raises(ValidationError):
        dielectric_reference_energy(s, spec, Ewald2DParams(alpha=1.0, h_max=2))


def test_dielectric_single_interface_exact():
    # One reflecting wall: the image series terminates at level one, so the
    # induced energy is exactly gamma * [C(0,0,2z) - C(L/2,L/2,2z)] for a
    # +-1 pair at equal heights, where C is the bare doubly periodic pair
    # kernel.  Differences of C are measurable as bare pair energies, which
    # pins the 1/2 polarization weighting with no shared code path.
    lx, z1 = 10.0, 1.1
    geom = SlabGeometry(lx, lx, 4.0)
    spec = DielectricSpec(1.0, 1.0, 1.0 / 3.0, n_levels=1)   # gamma_b = 0.5
    p = Ewald2DParams.for_tolerance(1.0, geom, 1e-13)
    pos = np.array([[0.0, 0.0, z1], [lx / 2, lx / 2, z1]])
    pair = np.array([1.0, -1.0])
    system = ParticleSystem(geom, pos, pair)
    cross = dielectric_reference_energy(system, spec, p) \
        - total_energy_2d(system, p).total

    tall = SlabGeometry(lx, lx, 8.0)
    p_tall = Ewald2DParams.for_tolerance(1.0, tall, 1e-13)

    def pair_energy(dx, dy, dz):
        pts = np.array([[1.0, 1.0, 2.0], [1.0 + dx, 1.0 + dy, 2.0 + dz]])
        return total_energy_2d(ParticleSystem(tall, pts, pair), p_tall).total

    expected = 0.5 * (pair_energy(lx / 2, lx / 2, 2 * z1)
                      - pair_energy(0.0, 0.0, 2 * z1))
    assert cross == pytest.approx(expected, rel=1e-9)
