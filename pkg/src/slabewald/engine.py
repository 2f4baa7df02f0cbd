"""Thermostatted molecular dynamics over the slab electrostatics stack.

One MD step assembles forces from three layers -- short-range Coulomb via
the neighbor list, reciprocal-space Coulomb either as the full deterministic
mode sum or as a random-batch estimate, and excluded-volume LJ/wall
repulsion -- then advances positions with a Langevin (BAOAB splitting) or
Nose-Hoover (chain length 1) integrator.  The stochastic force estimator
injects extra energy on average; the thermostats absorb it, which is why
runs in "rbe" mode are always thermostatted.

The engine owns the kinematic state: ``ParticleSystem`` is positions-only,
so velocities and the xy-unwrapped positions (needed for diffusion
analysis; z is confined and never wrapped) live in the run loop and in the
emitted frames.  Escape past a wall plane is checked on the raw arrays
before any system object is rebuilt and raises ``EscapeError`` with the
offending step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    STREAM_INIT,
    STREAM_SAMPLER,
    STREAM_THERMOSTAT,
    DielectricSpec,
    EnergyBreakdown,
    EscapeError,
    ParticleSystem,
    RngHandle,
    SlabGeometry,
    SplittingParams,
    ValidationError,
)
from .fourier import (
    choose_lz,
    dielectric_fourier_energy,
    dielectric_fourier_force,
    fourier3d_energy,
    fourier3d_force,
    ibc_energy_force,
    mode_cutoff,
)
from .realspace import (
    LJParams,
    WallParams,
    build_neighbor_list,
    lj_and_wall_energy_force,
    real_space_energy_force,
)
from .sampler import ModeSampler, precompute_y, rbe_force_dielectric, rbe_force_homogeneous

THERMOSTAT_KINDS = ("langevin", "nose-hoover", "none")
FORCE_MODES = ("deterministic", "rbe")

_HOMOGENEOUS = DielectricSpec(1.0, 1.0, 1.0, n_levels=0)


@dataclass(frozen=True)
class ThermostatConfig:
    """Ensemble control: kind, target temperature, and coupling strength.

    ``friction`` (1/time) is the Langevin drag; ``relaxation_time`` sets the
    Nose-Hoover mass Q = n_dof * k_b * T * tau^2.  Temperatures are energies
    via ``k_b * temperature``.  T = 0 is legal for Langevin (pure damping,
    used by quench tests) but not for Nose-Hoover, whose thermostat mass
    would vanish.
    """

    kind: str = "langevin"
    temperature: float = 1.0
    friction: float = 1.0
    relaxation_time: float = 0.1
    k_b: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in THERMOSTAT_KINDS:
            raise ValidationError(
                f"unknown thermostat kind {self.kind!r}: expected one of {THERMOSTAT_KINDS}")
        if self.k_b <= 0:
            raise ValidationError(f"k_b must be positive, got {self.k_b}")
        if self.kind == "langevin":
            if self.temperature < 0 or self.friction < 0:
                raise ValidationError("Langevin needs temperature >= 0 and friction >= 0")
        if self.kind == "nose-hoover":
            if self.temperature <= 0 or self.relaxation_time <= 0:
                raise ValidationError(
                    "Nose-Hoover needs temperature > 0 and relaxation_time > 0")

    @property
    def kt(self) -> float:
        return self.k_b * self.temperature


@dataclass
class NoseHooverState:
    """Auxiliary thermostat coordinates: xi (velocity-like), eta (integral).

    Start both at zero.  The conserved quantity of the extended system is
    K + U + Q xi^2 / 2 + n_dof k_b T eta.
    """

    xi: float = 0.0
    eta: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    """Everything one MD run needs besides the initial configuration."""

    dt: float
    n_equil: int
    n_prod: int
    sample_every: int = 1
    force_mode: str = "deterministic"
    batch_size: int = 100
    seed: int = 0
    geometry: SlabGeometry | None = None
    spec: DielectricSpec | None = None
    splitting: SplittingParams | None = None
    thermostat: ThermostatConfig = field(default_factory=ThermostatConfig)
    coulomb_coupling: float = 1.0
    lj: LJParams | None = None
    walls: WallParams | None = None

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if self.n_equil < 0 or self.n_prod < 0:
            raise ValidationError("step counts must be non-negative")
        if self.sample_every < 1:
            raise ValidationError(f"sample_every must be >= 1, got {self.sample_every}")
        if self.force_mode not in FORCE_MODES:
            raise ValidationError(
                f"unknown force mode {self.force_mode!r}: expected one of {FORCE_MODES}")
        if self.force_mode == "rbe" and self.batch_size < 1:
            raise ValidationError("rbe mode needs batch_size >= 1")
        if self.splitting is None:
            raise ValidationError("splitting parameters are required")
        if (self.lj is None) != (self.walls is None):
            raise ValidationError("provide lj and walls together or neither")
        if self.coulomb_coupling < 0:
            raise ValidationError("coulomb_coupling must be >= 0")


@dataclass(frozen=True)
class TrajectoryFrame:
    """One sampled state: positions are xy-unwrapped (z is physical)."""

    step: int
    time: float
    positions: np.ndarray
    velocities: np.ndarray
    energy: EnergyBreakdown
    temperature: float


@dataclass(frozen=True)
class RunSummary:
    frames: list
    n_steps: int
    mean_temperature_equil: float
    mean_temperature_prod: float
    wall_time: float
    final_positions: np.ndarray
    final_velocities: np.ndarray

    @property
    def seconds_per_step(self) -> float:
        return self.wall_time / max(self.n_steps, 1)


# ---------------------------------------------------------------------------
# kinematics helpers
# ---------------------------------------------------------------------------

def maxwell_velocities(system: ParticleSystem, kt: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Maxwell-Boltzmann draw with the center-of-mass drift removed."""
    sigma = np.sqrt(kt / system.masses)[:, None]
    v = rng.normal(size=(system.n, 3)) * sigma
    total_mass = system.masses.sum()
    v -= (system.masses[:, None] * v).sum(axis=0) / total_mass
    return v


def instantaneous_temperature(velocities: np.ndarray, masses: np.ndarray,
                              k_b: float = 1.0, n_dof: int | None = None) -> float:
    """Kinetic temperature 2K / (n_dof k_b); default n_dof = 3N."""
    if n_dof is None:
        n_dof = 3 * len(masses)
    kinetic = 0.5 * float(np.sum(masses[:, None] * velocities**2))
    return 2.0 * kinetic / (n_dof * k_b)


def _check_inside(positions: np.ndarray, velocities: np.ndarray,
                  geometry: SlabGeometry, step: int) -> None:
    z = positions[:, 2]
    bad = ~np.isfinite(positions).all(axis=1) | (z <= 0.0) | (z >= geometry.h)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise EscapeError(
            f"step {step}: particle {i} left the slab "
            f"(position {positions[i].tolist()}, velocity {velocities[i].tolist()}, "
            f"slab height {geometry.h}); reduce dt or check the force setup")


def _n_dof(system: ParticleSystem, kind: str) -> int:
    # Langevin noise breaks momentum conservation; the deterministic
    # integrators preserve the (zero-initialized) xy momentum, walls and
    # images exchange z momentum with the boundaries.
    if kind == "langevin":
        return 3 * system.n
    return 3 * system.n - 2


# ---------------------------------------------------------------------------
# integrators (shared raw-array kernels + public single-step ops)
# ---------------------------------------------------------------------------

def _half_kick(velocities, forces, masses, dt):
    velocities += (0.5 * dt / masses)[:, None] * forces


def _ou_update(velocities, masses, thermostat, dt, rng):
    if thermostat.friction == 0.0:
        return
    decay = math.exp(-thermostat.friction * dt)
    noise = np.sqrt((1.0 - decay * decay) * thermostat.kt / masses)[:, None]
    velocities *= decay
    velocities += noise * rng.normal(size=velocities.shape)


def _nh_half(velocities, masses, state, thermostat, n_dof, dt):
    q_mass = n_dof * thermostat.kt * thermostat.relaxation_time**2
    kinetic = 0.5 * float(np.sum(masses[:, None] * velocities**2))
    state.xi += 0.25 * dt * (2.0 * kinetic - n_dof * thermostat.kt) / q_mass
    scale = math.exp(-state.xi * 0.5 * dt)
    velocities *= scale
    state.eta += 0.5 * dt * state.xi
    kinetic *= scale * scale
    state.xi += 0.25 * dt * (2.0 * kinetic - n_dof * thermostat.kt) / q_mass


def nose_hoover_extended_energy(kinetic: float, potential: float,
                                state: NoseHooverState,
                                thermostat: ThermostatConfig,
                                n_dof: int) -> float:
    """Conserved quantity of the extended Nose-Hoover system."""
    q_mass = n_dof * thermostat.kt * thermostat.relaxation_time**2
    return (kinetic + potential + 0.5 * q_mass * state.xi**2
            + n_dof * thermostat.kt * state.eta)


def langevin_step(system, velocities, forces, dt, thermostat, rng, force_fn,
                  step: int = 0):
    """One BAOAB step: kick, drift, Ornstein-Uhlenbeck, drift, kick.

    ``forces`` must match the incoming positions; the returned forces match
    the returned positions, so consecutive calls reuse one evaluation per
    step.  With friction 0 the OU stage is the identity and the step is
    plain velocity Verlet.  Returns (system, velocities, forces).
    """
    v = velocities.copy()
    masses = system.masses
    _half_kick(v, forces, masses, dt)
    pos = system.positions + 0.5 * dt * v
    _ou_update(v, masses, thermostat, dt, rng)
    pos += 0.5 * dt * v
    _check_inside(pos, v, system.geometry, step)
    moved = system.with_positions(pos)
    new_forces = force_fn(moved)
    _half_kick(v, new_forces, masses, dt)
    return moved, v, new_forces


def nose_hoover_step(system, velocities, forces, dt, thermostat, state,
                     force_fn, n_dof: int | None = None, step: int = 0):
    """One Nose-Hoover step: half thermostat, velocity Verlet, half thermostat.

    ``state`` is updated in place (xi, eta start at zero for a fresh run).
    Returns (system, velocities, forces).
    """
    if n_dof is None:
        n_dof = _n_dof(system, "nose-hoover")
    v = velocities.copy()
    masses = system.masses
    _nh_half(v, masses, state, thermostat, n_dof, dt)
    _half_kick(v, forces, masses, dt)
    pos = system.positions + dt * v
    _check_inside(pos, v, system.geometry, step)
    moved = system.with_positions(pos)
    new_forces = force_fn(moved)
    _half_kick(v, new_forces, masses, dt)
    _nh_half(v, masses, state, thermostat, n_dof, dt)
    return moved, v, new_forces


# ---------------------------------------------------------------------------
# force assembly
# ---------------------------------------------------------------------------

class _ForceField:
    """Per-run force state: neighbor list, mode cutoff, sampler chains."""

    def __init__(self, system: ParticleSystem, config: RunConfig):
        self.config = config
        split = config.splitting
        self.alpha = split.alpha
        self.spec = config.spec if config.spec is not None else _HOMOGENEOUS
        self.uses_images = not self.spec.is_homogeneous
        self.coupling = config.coulomb_coupling
        self.k_max = mode_cutoff(system.geometry, self.alpha, split.tolerance)
        self.nlist = build_neighbor_list(system, split.r_cut)
        self.sampler = None
        if config.force_mode == "rbe":
            self.sampler = ModeSampler(
                system.geometry, self.alpha, config.batch_size,
                RngHandle(config.seed, STREAM_SAMPLER))
        if self.uses_images:
            # fail fast on an under-padded cell rather than mid-run
            dielectric_fourier_energy(system, self.spec, self.alpha, 1)

    def _refresh_nlist(self, system: ParticleSystem) -> None:
        if self.nlist.needs_rebuild(system):
            self.nlist = build_neighbor_list(
                system, self.config.splitting.r_cut)

    def forces(self, system: ParticleSystem) -> np.ndarray:
        self._refresh_nlist(system)
        if self.coupling == 0.0:
            total = np.zeros_like(system.positions)
        else:
            _, f = real_space_energy_force(
                system, self.spec, self.alpha, self.nlist)
            total = self.coupling * f
            total += self.coupling * self._kspace_force(system)
        if self.config.lj is not None:
            _, _, f_short = lj_and_wall_energy_force(
                system, self.config.lj, self.config.walls, self.nlist)
            total += f_short
        return total

    def _kspace_force(self, system: ParticleSystem) -> np.ndarray:
        if self.sampler is not None:
            batch = self.sampler.sample_batch()
            if self.uses_images:
                batch = precompute_y(batch, self.spec, system.geometry.h)
                return rbe_force_dielectric(system, self.spec, self.alpha,
                                            batch, check_stability=False)
            return rbe_force_homogeneous(system, self.alpha, batch)
        if self.uses_images:
            f = dielectric_fourier_force(system, self.spec, self.alpha,
                                         self.k_max, check_stability=False)
        else:
            f = fourier3d_force(system, self.alpha, self.k_max)
        return f + ibc_energy_force(system, self.spec)[1]

    def energy(self, system: ParticleSystem) -> EnergyBreakdown:
        """Deterministic breakdown at the current positions (frame sampling).

        Evaluated with the full mode sum in both force modes so that frame
        energies from rbe and deterministic runs are directly comparable;
        the layer correction is not included (the padded Lz puts it below
        the splitting tolerance).
        """
        self._refresh_nlist(system)
        if self.coupling == 0.0:
            u_real = u_fourier = u_self = u_ibc = 0.0
        else:
            u_real = self.coupling * real_space_energy_force(
                system, self.spec, self.alpha, self.nlist)[0]
            if self.uses_images:
                u_k = dielectric_fourier_energy(
                    system, self.spec, self.alpha, self.k_max,
                    check_stability=False)
            else:
                u_k = fourier3d_energy(system, self.alpha, self.k_max)
            u_self = self.coupling * (-self.alpha / math.sqrt(math.pi)
                                      * float(np.sum(system.charges**2)))
            u_fourier = self.coupling * u_k - u_self
            u_ibc = self.coupling * ibc_energy_force(system, self.spec)[0]
        u_lj = u_wall = 0.0
        if self.config.lj is not None:
            u_lj, u_wall, _ = lj_and_wall_energy_force(
                system, self.config.lj, self.config.walls, self.nlist)
        return EnergyBreakdown(
            u_real=u_real, u_fourier=u_fourier,
            u_self=u_self, u_ibc=u_ibc, u_elc=0.0,
            u_lj=u_lj, u_wall=u_wall, method="ewald3d+ibc")


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def resolve_geometry(config: RunConfig, base: SlabGeometry) -> SlabGeometry:
    """Fill in the artificial period when the input geometry lacks one."""
    geometry = config.geometry if config.geometry is not None else base
    if geometry.lz is not None:
        return geometry
    levels = config.spec.n_levels if config.spec is not None else 0
    lz = choose_lz(geometry, config.splitting.alpha,
                   config.splitting.tolerance, n_levels=levels)
    return SlabGeometry(geometry.lx, geometry.ly, geometry.h, lz=lz)


def single_point_energy(system: ParticleSystem,
                        config: RunConfig) -> EnergyBreakdown:
    """Deterministic energy breakdown of one configuration under a config.

    Uses the same force-field assembly as the run loop (reformulated
    reciprocal sum, boundary correction, short-range terms) without
    advancing any dynamics.
    """
    geometry = resolve_geometry(config, system.geometry)
    base = system.geometry
    if (geometry.lx, geometry.ly, geometry.h) != (base.lx, base.ly, base.h):
        raise ValidationError(
            "config geometry does not match the system's box dimensions")
    if geometry is not base:
        system = ParticleSystem(geometry, system.positions, system.charges,
                                system.masses, system.species)
    return _ForceField(system, config).energy(system)


def run_simulation(system: ParticleSystem, config: RunConfig,
                   sinks=(), keep_frames: bool = True,
                   velocities: np.ndarray | None = None) -> RunSummary:
    """Equilibrate, produce, and sample one MD run.

    Emits a :class:`TrajectoryFrame` to every sink (and to the returned
    summary unless ``keep_frames`` is False) every ``sample_every``-th
    production step.  Identical config and seed give bitwise-identical
    trajectories.  Stability and escape failures carry the offending step.
    """
    geometry = resolve_geometry(config, system.geometry)
    if geometry is not system.geometry:
        if (geometry.lx, geometry.ly, geometry.h) != (
                system.geometry.lx, system.geometry.ly, system.geometry.h):
            raise ValidationError(
                "config geometry does not match the system's slab dimensions")
        system = ParticleSystem(geometry, system.positions, system.charges,
                                system.masses, system.species)

    thermostat = config.thermostat
    if velocities is None:
        init_rng = RngHandle(config.seed, STREAM_INIT).generator()
        velocities = maxwell_velocities(system, thermostat.kt, init_rng)
    else:
        velocities = np.array(velocities, dtype=float)
        if velocities.shape != (system.n, 3):
            raise ValidationError(
                f"velocities must have shape ({system.n}, 3), got {velocities.shape}")

    field_state = _ForceField(system, config)
    thermo_rng = RngHandle(config.seed, STREAM_THERMOSTAT).generator()
    nh_state = NoseHooverState()
    n_dof = _n_dof(system, thermostat.kind)
    masses = system.masses
    dt = config.dt

    # raw state: xy-unwrapped positions (frames and diffusion need them);
    # the wrapped ParticleSystem view is rebuilt for force evaluation
    raw_pos = system.positions.copy()
    v = velocities.copy()
    forces = field_state.forces(system)

    frames: list[TrajectoryFrame] = []
    temp_sums = {"equil": 0.0, "prod": 0.0}
    total_steps = config.n_equil + config.n_prod
    started = time.perf_counter()

    for step in range(1, total_steps + 1):
        try:
            if thermostat.kind == "nose-hoover":
                _nh_half(v, masses, nh_state, thermostat, n_dof, dt)
                _half_kick(v, forces, masses, dt)
                raw_pos += dt * v
            else:
                _half_kick(v, forces, masses, dt)
                raw_pos += 0.5 * dt * v
                if thermostat.kind == "langevin":
                    _ou_update(v, masses, thermostat, dt, thermo_rng)
                raw_pos += 0.5 * dt * v
            _check_inside(raw_pos, v, geometry, step)
            system = system.with_positions(raw_pos)
            forces = field_state.forces(system)
            _half_kick(v, forces, masses, dt)
            if thermostat.kind == "nose-hoover":
                _nh_half(v, masses, nh_state, thermostat, n_dof, dt)
        except (EscapeError, ValidationError):
            raise
        except Exception as exc:  # stability errors carry the step index
            raise type(exc)(f"step {step}: {exc}") from exc

        phase = "equil" if step <= config.n_equil else "prod"
        temp_sums[phase] += instantaneous_temperature(v, masses,
                                                      thermostat.k_b, n_dof)
        if phase == "prod":
            prod_step = step - config.n_equil
            if prod_step % config.sample_every == 0:
                frame = TrajectoryFrame(
                    step=step, time=step * dt,
                    positions=raw_pos.copy(), velocities=v.copy(),
                    energy=field_state.energy(system),
                    temperature=instantaneous_temperature(
                        v, masses, thermostat.k_b, n_dof))
                for sink in sinks:
                    sink(frame)
                if keep_frames:
                    frames.append(frame)

    wall_time = time.perf_counter() - started
    return RunSummary(
        frames=frames,
        n_steps=total_steps,
        mean_temperature_equil=(temp_sums["equil"] / config.n_equil
                                if config.n_equil else float("nan")),
        mean_temperature_prod=(temp_sums["prod"] / config.n_prod
                               if config.n_prod else float("nan")),
        wall_time=wall_time,
        final_positions=raw_pos.copy(),
        final_velocities=v.copy(),
    )
