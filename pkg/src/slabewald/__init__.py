"""slabewald: electrostatics and molecular dynamics for slab-confined charges.

Charges periodic in x/y and confined between two planar interfaces at
z = 0 and z = h, with optional dielectric mismatch handled by image
charges.  Provides an exact doubly-periodic Ewald reference, a
vacuum-layer 3D reformulation with boundary corrections, a stochastic
(random-batch) reciprocal-space force estimator, thermostatted MD, and
trajectory analysis.
"""

from .analysis import (
    Histogram1D,
    ScalingRecord,
    concentration_profile,
    energy_histogram,
    msd,
    strong_scaling,
    vacf,
    w2_distance,
    write_csv,
)
from .config import (
    ExperimentConfig,
    SpeciesSpec,
    config_hash,
    list_presets,
    parse_config,
    preset_config,
)
from .core import (
    DielectricSpec,
    EnergyBreakdown,
    ImageConvention,
    ParticleSystem,
    RngHandle,
    SingularityError,
    SlabGeometry,
    SplittingParams,
    StabilityError,
    ValidationError,
    default_alpha,
    dielectric_contrast,
    image_series,
)
from .engine import (
    NoseHooverState,
    RunConfig,
    RunSummary,
    ThermostatConfig,
    TrajectoryFrame,
    instantaneous_temperature,
    langevin_step,
    maxwell_velocities,
    nose_hoover_extended_energy,
    nose_hoover_step,
    resolve_geometry,
    run_simulation,
    single_point_energy,
)
from .fourier import (
    KMode,
    choose_lz,
    choose_n_levels,
    dielectric_fourier_energy,
    dielectric_fourier_force,
    elc_energy,
    fourier3d_energy,
    fourier3d_force,
    ibc_energy_force,
    mode_cutoff,
    mode_table,
    trapezoid_error_report,
)
from .realspace import (
    LJParams,
    WallParams,
    build_neighbor_list,
    lj_and_wall_energy_force,
    real_space_energy_force,
)
from .reference import (
    Ewald2DParams,
    dielectric_reference_energy,
    energy_fourier_2d,
    energy_real_2d,
    force_fd_oracle,
    total_energy_2d,
)
from .sampler import (
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
from .trajectory import (
    TrajectoryFile,
    TrajectoryWriter,
    read_trajectory,
)

__version__ = "0.1.0"

__all__ = [
    "DielectricSpec",
    "EnergyBreakdown",
    "Ewald2DParams",
    "ExperimentConfig",
    "Histogram1D",
    "ImageConvention",
    "KBatch",
    "KMode",
    "LJParams",
    "ModeSampler",
    "NoseHooverState",
    "ParticleSystem",
    "RngHandle",
    "RunConfig",
    "RunSummary",
    "ScalingRecord",
    "SingularityError",
    "SlabGeometry",
    "SpeciesSpec",
    "SplittingParams",
    "StabilityError",
    "ThermostatConfig",
    "TrajectoryFile",
    "TrajectoryFrame",
    "TrajectoryWriter",
    "ValidationError",
    "VarianceReport",
    "WallParams",
    "build_neighbor_list",
    "choose_lz",
    "choose_n_levels",
    "concentration_profile",
    "config_hash",
    "default_alpha",
    "dielectric_contrast",
    "dielectric_fourier_energy",
    "dielectric_fourier_force",
    "dielectric_reference_energy",
    "elc_energy",
    "energy_fourier_2d",
    "energy_histogram",
    "energy_real_2d",
    "exhaustive_batch",
    "force_fd_oracle",
    "fourier3d_energy",
    "fourier3d_force",
    "ibc_energy_force",
    "image_series",
    "instantaneous_temperature",
    "langevin_step",
    "list_presets",
    "lj_and_wall_energy_force",
    "maxwell_velocities",
    "mode_cutoff",
    "mode_table",
    "msd",
    "normalization_s",
    "nose_hoover_extended_energy",
    "nose_hoover_step",
    "parse_config",
    "precompute_y",
    "preset_config",
    "rbe_energy_fourier",
    "rbe_force_dielectric",
    "rbe_force_homogeneous",
    "read_trajectory",
    "real_space_energy_force",
    "resolve_geometry",
    "run_simulation",
    "sample_batch",
    "single_point_energy",
    "strong_scaling",
    "total_energy_2d",
    "trapezoid_error_report",
    "vacf",
    "variance_report",
    "w2_distance",
    "write_csv",
    "__version__",
]
