"""Experiment configuration: TOML parsing, presets, and system building.

An :class:`ExperimentConfig` collects everything a run needs — box and
species, run-control parameters, splitting/thermostat settings, optional
dielectric mismatch, and output paths — in one flat, validated record.
``parse_config`` reads a TOML file, rejects unknown keys, checks charge
neutrality, and resolves the derived defaults (splitting parameter from
the density rule, image truncation level, artificial period), so the
returned config always carries concrete numbers.  ``to_toml`` writes the
config back out losslessly; ``config_hash`` fingerprints the resolved
values for trajectory tamper detection.

Built-in presets encode the reference test systems: a 3:1 primitive-model
electrolyte between repulsive walls at full scale and at desk scale
(particle count divided by 5 at equal density, step counts divided by
100), and the desk-scale system between symmetric dielectric interfaces.
Asymmetric surface-charge variants are deliberately absent: their exact
parameter tables live in supplementary material that is not available, so
no preset pretends to reproduce them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields, replace
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .core import (
    DielectricSpec,
    ParticleSystem,
    RngHandle,
    SlabGeometry,
    ValidationError,
    default_alpha,
)
from .engine import RunConfig, ThermostatConfig
from .fourier import choose_lz, choose_n_levels
from .realspace import LJParams, WallParams

__all__ = [
    "STREAM_PLACEMENT",
    "ExperimentConfig",
    "SpeciesSpec",
    "config_hash",
    "list_presets",
    "parse_config",
    "preset_config",
]

# placement draws must not share a stream with the velocity/thermostat/
# sampler streams consumed during the run
STREAM_PLACEMENT = 3


@dataclass(frozen=True)
class SpeciesSpec:
    """One ionic species: how many, what charge, what mass."""

    name: str
    count: int
    charge: float
    mass: float = 1.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("species name must be nonempty")
        if self.count < 0:
            raise ValidationError(f"species count must be >= 0, got {self.count}")
        if self.mass <= 0:
            raise ValidationError(f"species mass must be > 0, got {self.mass}")


@dataclass(frozen=True)
class ExperimentConfig:
    """File-backed description of one experiment.

    ``alpha``, ``n_levels``, and ``lz`` may be None in a freshly written
    file; :meth:`resolve` (called by :func:`parse_config`) fills them from
    the density rule and the tolerance-driven selectors so round-tripped
    configs always echo the concrete values used.
    """

    # system
    lx: float
    ly: float
    h: float
    species: tuple[SpeciesSpec, ...]
    lz: Optional[float] = None
    bjerrum_length: float = 1.0
    # run control
    dt: float = 1e-3
    n_equil: int = 0
    n_prod: int = 0
    sample_every: int = 1
    force_mode: str = "rbe"
    batch_size: int = 100
    seed: int = 0
    # splitting
    alpha: Optional[float] = None
    alpha_multiplier: float = 1.0
    r_cut: float = 1.0
    tolerance: float = 1e-6
    # thermostat
    thermostat_kind: str = "nose-hoover"
    temperature: float = 1.0
    relaxation_time: float = 0.01
    friction: float = 1.0
    k_b: float = 1.0
    # short-range interactions
    lj_epsilon: Optional[float] = 1.0
    lj_sigma: Optional[float] = 1.0
    wall_epsilon: Optional[float] = 1.0
    wall_sigma: Optional[float] = 0.5
    # dielectric boundaries
    gamma_top: float = 0.0
    gamma_bottom: float = 0.0
    n_levels: Optional[int] = None
    # artifacts
    trajectory_path: str = "run.traj"
    summary_path: str = "summary.json"
    preset: Optional[str] = None

    def __post_init__(self) -> None:
        if self.lx <= 0 or self.ly <= 0 or self.h <= 0:
            raise ValidationError("box dimensions must be positive")
        if self.lz is not None and self.lz <= self.h:
            raise ValidationError("artificial period must exceed the slab height")
        if not self.species:
            raise ValidationError("at least one species is required")
        if self.n_particles == 0:
            raise ValidationError("species counts sum to zero particles")
        if self.bjerrum_length < 0:
            raise ValidationError("bjerrum_length must be >= 0")
        if self.r_cut <= 0:
            raise ValidationError("r_cut must be positive")
        if not 0.0 < self.tolerance < 1.0:
            raise ValidationError("tolerance must lie in (0, 1)")
        if self.alpha is not None and self.alpha <= 0:
            raise ValidationError("alpha must be positive when given")
        if self.alpha_multiplier <= 0:
            raise ValidationError("alpha_multiplier must be positive")
        for gamma in (self.gamma_top, self.gamma_bottom):
            if not -1.0 <= gamma <= 1.0:
                raise ValidationError(
                    f"dielectric contrast must lie in [-1, 1], got {gamma}")
        lj_given = [self.lj_epsilon, self.lj_sigma,
                    self.wall_epsilon, self.wall_sigma]
        if any(v is None for v in lj_given) != all(v is None for v in lj_given):
            raise ValidationError(
                "lj and wall parameters must be given together or omitted together")

    # -- derived views ----------------------------------------------------

    @property
    def n_particles(self) -> int:
        return sum(s.count for s in self.species)

    @property
    def net_charge(self) -> float:
        return math.fsum(s.count * s.charge for s in self.species)

    @property
    def geometry(self) -> SlabGeometry:
        return SlabGeometry(self.lx, self.ly, self.h, lz=self.lz)

    @property
    def has_dielectric(self) -> bool:
        return self.gamma_top != 0.0 or self.gamma_bottom != 0.0

    @property
    def is_resolved(self) -> bool:
        levels_known = self.n_levels is not None or not self.has_dielectric
        return (self.alpha is not None and self.lz is not None
                and levels_known)

    def dielectric_spec(self) -> Optional[DielectricSpec]:
        if not self.has_dielectric:
            return None
        if self.n_levels is None:
            raise ValidationError("resolve the config before building specs")

        def eps_outer(gamma: float) -> float:
            return 0.0 if gamma == 1.0 else (1.0 - gamma) / (1.0 + gamma)

        return DielectricSpec(1.0, eps_outer(self.gamma_top),
                              eps_outer(self.gamma_bottom),
                              n_levels=self.n_levels)

    def require_neutral(self) -> None:
        if abs(self.net_charge) > 1e-9:
            raise ValidationError(
                f"species are not charge neutral: net charge {self.net_charge}")

    # -- resolution -------------------------------------------------------

    def resolve(self) -> "ExperimentConfig":
        """Fill splitting parameter, image level, and artificial period."""
        self.require_neutral()
        alpha = self.alpha
        if alpha is None:
            alpha = default_alpha(self.n_particles, self.geometry,
                                  self.alpha_multiplier)
        n_levels = self.n_levels
        if n_levels is None:
            if self.has_dielectric:
                probe = replace(self, alpha=alpha, n_levels=0)
                n_levels = choose_n_levels(self.geometry,
                                           probe.dielectric_spec(),
                                           self.tolerance)
            else:
                n_levels = 0
        lz = self.lz
        if lz is None:
            lz = choose_lz(SlabGeometry(self.lx, self.ly, self.h), alpha,
                           self.tolerance, n_levels=n_levels)
        return replace(self, alpha=alpha, n_levels=n_levels, lz=lz)

    def run_config(self) -> RunConfig:
        """The engine-facing view of this (resolved) config."""
        if not self.is_resolved:
            raise ValidationError("resolve the config before building a run")
        from .core import SplittingParams

        lj = walls = None
        if self.lj_epsilon is not None:
            lj = LJParams(self.lj_epsilon, self.lj_sigma)
            walls = WallParams(self.wall_epsilon, self.wall_sigma)
        thermostat = ThermostatConfig(
            kind=self.thermostat_kind, temperature=self.temperature,
            friction=self.friction, relaxation_time=self.relaxation_time,
            k_b=self.k_b)
        return RunConfig(
            dt=self.dt, n_equil=self.n_equil, n_prod=self.n_prod,
            sample_every=self.sample_every, force_mode=self.force_mode,
            batch_size=self.batch_size, seed=self.seed,
            geometry=self.geometry, spec=self.dielectric_spec(),
            splitting=SplittingParams(self.alpha, self.r_cut,
                                      tolerance=self.tolerance,
                                      batch_size=self.batch_size),
            thermostat=thermostat,
            coulomb_coupling=self.bjerrum_length * self.k_b * self.temperature,
            lj=lj, walls=walls)

    def species_labels(self) -> np.ndarray:
        """Integer label per particle, in species order."""
        return np.repeat(np.arange(len(self.species)),
                         [s.count for s in self.species])

    def species_mask(self, name: str) -> np.ndarray:
        for index, spec in enumerate(self.species):
            if spec.name == name:
                return self.species_labels() == index
        raise ValidationError(
            f"unknown species {name!r}: have {[s.name for s in self.species]}")

    def build_system(self, seed: Optional[int] = None) -> ParticleSystem:
        """Random nonoverlapping initial configuration inside the walls.

        Draws uniform positions with z clear of the wall cores, then
        redraws any particle with a neighbor closer than 0.9 LJ diameters
        until none remain (low-density configurations converge in a few
        rounds).  Deterministic given the seed; uses its own stream so
        run-time draws are untouched.
        """
        from scipy.spatial import cKDTree

        rng = RngHandle(self.seed if seed is None else seed,
                        STREAM_PLACEMENT).generator()
        sigma = self.lj_sigma if self.lj_sigma is not None else 1.0
        wall_sigma = self.wall_sigma if self.wall_sigma is not None else 0.0
        z_margin = 2.0 ** (1.0 / 6.0) * wall_sigma
        if 2 * z_margin >= self.h:
            raise ValidationError("wall cores overlap: slab too thin")
        n = self.n_particles
        min_dist = 0.9 * sigma
        lo = np.array([0.0, 0.0, z_margin + 1e-9])
        hi = np.array([self.lx, self.ly, self.h - z_margin - 1e-9])
        positions = rng.uniform(lo, hi, size=(n, 3))
        for _ in range(500):
            tree = cKDTree(positions,
                           boxsize=[self.lx, self.ly, 4 * self.h])
            pairs = tree.query_pairs(min_dist, output_type="ndarray")
            if len(pairs) == 0:
                break
            redraw = np.unique(pairs[:, 1])
            positions[redraw] = rng.uniform(lo, hi, size=(len(redraw), 3))
        else:
            raise ValidationError(
                "could not place particles without overlaps; lower the density")
        charges = np.repeat([s.charge for s in self.species],
                            [s.count for s in self.species])
        masses = np.repeat([s.mass for s in self.species],
                           [s.count for s in self.species])
        return ParticleSystem(self.geometry, positions, charges,
                              masses=masses, species=self.species_labels())

    # -- serialization ----------------------------------------------------

    def as_dict(self) -> dict:
        """Nested (section -> key -> value) view matching the file format."""
        data: dict[str, Any] = {}
        if self.preset is not None:
            data["preset"] = self.preset
        data["system"] = {
            "lx": self.lx, "ly": self.ly, "h": self.h,
            "species": [
                {"name": s.name, "count": s.count,
                 "charge": s.charge, "mass": s.mass}
                for s in self.species],
            "bjerrum_length": self.bjerrum_length,
        }
        if self.lz is not None:
            data["system"]["lz"] = self.lz
        data["run"] = {
            "dt": self.dt, "n_equil": self.n_equil, "n_prod": self.n_prod,
            "sample_every": self.sample_every, "force_mode": self.force_mode,
            "batch_size": self.batch_size, "seed": self.seed,
        }
        data["splitting"] = {
            "alpha_multiplier": self.alpha_multiplier,
            "r_cut": self.r_cut, "tolerance": self.tolerance,
        }
        if self.alpha is not None:
            data["splitting"]["alpha"] = self.alpha
        data["thermostat"] = {
            "kind": self.thermostat_kind, "temperature": self.temperature,
            "relaxation_time": self.relaxation_time,
            "friction": self.friction, "k_b": self.k_b,
        }
        if self.lj_epsilon is not None:
            data["lj"] = {"epsilon": self.lj_epsilon, "sigma": self.lj_sigma}
            data["walls"] = {"epsilon": self.wall_epsilon,
                             "sigma": self.wall_sigma}
        dielectric: dict[str, Any] = {}
        if self.has_dielectric:
            dielectric = {"gamma_top": self.gamma_top,
                          "gamma_bottom": self.gamma_bottom}
        if self.n_levels is not None:
            dielectric["n_levels"] = self.n_levels
        if dielectric:
            data["dielectric"] = dielectric
        data["output"] = {"trajectory": self.trajectory_path,
                          "summary": self.summary_path}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Inverse of :meth:`as_dict`; rejects unknown sections and keys."""
        def take(table: dict, section: str, key: str, default=_MISSING):
            if key in table:
                return table.pop(key)
            if default is _MISSING:
                raise ValidationError(f"missing required key '{section}.{key}'")
            return default

        def finish(table: dict, section: str) -> None:
            if table:
                key = next(iter(table))
                raise ValidationError(f"unknown key '{section}.{key}'")

        top = dict(data)
        preset = top.pop("preset", None)
        kwargs: dict[str, Any] = {"preset": preset}

        system = dict(top.pop("system", {}))
        kwargs["lx"] = take(system, "system", "lx")
        kwargs["ly"] = take(system, "system", "ly")
        kwargs["h"] = take(system, "system", "h")
        kwargs["lz"] = take(system, "system", "lz", None)
        kwargs["bjerrum_length"] = take(system, "system", "bjerrum_length", 1.0)
        raw_species = take(system, "system", "species")
        finish(system, "system")
        species = []
        for index, entry in enumerate(raw_species):
            entry = dict(entry)
            spec = SpeciesSpec(
                name=str(take(entry, f"species[{index}]", "name")),
                count=int(take(entry, f"species[{index}]", "count")),
                charge=float(take(entry, f"species[{index}]", "charge")),
                mass=float(take(entry, f"species[{index}]", "mass", 1.0)))
            finish(entry, f"species[{index}]")
            species.append(spec)
        kwargs["species"] = tuple(species)

        run = dict(top.pop("run", {}))
        for key, default in (("dt", 1e-3), ("n_equil", 0), ("n_prod", 0),
                             ("sample_every", 1), ("force_mode", "rbe"),
                             ("batch_size", 100), ("seed", 0)):
            kwargs[key] = take(run, "run", key, default)
        finish(run, "run")

        splitting = dict(top.pop("splitting", {}))
        kwargs["alpha"] = take(splitting, "splitting", "alpha", None)
        kwargs["alpha_multiplier"] = take(splitting, "splitting",
                                          "alpha_multiplier", 1.0)
        kwargs["r_cut"] = take(splitting, "splitting", "r_cut", 1.0)
        kwargs["tolerance"] = take(splitting, "splitting", "tolerance", 1e-6)
        finish(splitting, "splitting")

        thermostat = dict(top.pop("thermostat", {}))
        kwargs["thermostat_kind"] = take(thermostat, "thermostat", "kind",
                                         "nose-hoover")
        for key, default in (("temperature", 1.0), ("relaxation_time", 0.01),
                             ("friction", 1.0), ("k_b", 1.0)):
            kwargs[key] = take(thermostat, "thermostat", key, default)
        finish(thermostat, "thermostat")

        if "lj" in top or "walls" in top:
            lj = dict(top.pop("lj", {}))
            walls = dict(top.pop("walls", {}))
            kwargs["lj_epsilon"] = take(lj, "lj", "epsilon")
            kwargs["lj_sigma"] = take(lj, "lj", "sigma")
            kwargs["wall_epsilon"] = take(walls, "walls", "epsilon")
            kwargs["wall_sigma"] = take(walls, "walls", "sigma")
            finish(lj, "lj")
            finish(walls, "walls")
        else:
            kwargs["lj_epsilon"] = kwargs["lj_sigma"] = None
            kwargs["wall_epsilon"] = kwargs["wall_sigma"] = None

        dielectric = dict(top.pop("dielectric", {}))
        kwargs["gamma_top"] = take(dielectric, "dielectric", "gamma_top", 0.0)
        kwargs["gamma_bottom"] = take(dielectric, "dielectric",
                                      "gamma_bottom", 0.0)
        raw_levels = take(dielectric, "dielectric", "n_levels", None)
        kwargs["n_levels"] = None if raw_levels is None else int(raw_levels)
        finish(dielectric, "dielectric")

        output = dict(top.pop("output", {}))
        kwargs["trajectory_path"] = take(output, "output", "trajectory",
                                         "run.traj")
        kwargs["summary_path"] = take(output, "output", "summary",
                                      "summary.json")
        finish(output, "output")
        finish(top, "top level")
        return cls(**kwargs)

    def to_toml(self) -> str:
        """Config file text; parsing it back reproduces this config."""
        lines: list[str] = []
        data = self.as_dict()
        if "preset" in data:
            lines.append(f"preset = {_toml_value(data.pop('preset'))}")
            lines.append("")
        for section, table in data.items():
            lines.append(f"[{section}]")
            for key, value in table.items():
                if key == "species":
                    rows = ", ".join(
                        "{ " + ", ".join(f"{k} = {_toml_value(v)}"
                                         for k, v in row.items()) + " }"
                        for row in value)
                    lines.append(f"species = [{rows}]")
                else:
                    lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)


_MISSING = object()


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        text = repr(float(value))
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    raise ValidationError(f"cannot serialize {type(value).__name__} to TOML")


def parse_config(path) -> ExperimentConfig:
    """Read, validate, and resolve an experiment file.

    Syntax errors surface with the parser's line/column message; semantic
    errors name the offending key; a non-neutral species table is
    rejected.  The returned config has alpha, the image level, and the
    artificial period filled in.
    """
    with open(path, "rb") as handle:
        try:
            data = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"syntax error in {path}: {exc}") from exc
    config = ExperimentConfig.from_dict(data)
    return config.resolve()


def config_hash(config: ExperimentConfig) -> bytes:
    """SHA-256 over the canonical JSON of the resolved config (32 bytes)."""
    resolved = config if config.is_resolved else config.resolve()
    canonical = json.dumps(resolved.as_dict(), sort_keys=True,
                           separators=(",", ":"),
                           default=float)
    return hashlib.sha256(canonical.encode()).digest()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_FULL_LX = 90.0
_DESK_LX = 90.0 / math.sqrt(5.0)  # same density at 1/5 the particle count


def _electrolyte_3_1(desk: bool) -> ExperimentConfig:
    scale = 5 if desk else 1
    steps = 100 if desk else 1
    return ExperimentConfig(
        lx=_DESK_LX if desk else _FULL_LX,
        ly=_DESK_LX if desk else _FULL_LX,
        h=30.0,
        species=(SpeciesSpec("cation", 750 // scale, 3.0),
                 SpeciesSpec("anion", 2250 // scale, -1.0)),
        bjerrum_length=3.5,
        dt=1e-3, n_equil=1_000_000 // steps, n_prod=10_000_000 // steps,
        sample_every=100, force_mode="rbe", batch_size=100, seed=0,
        r_cut=10.0, tolerance=1e-4,
        thermostat_kind="nose-hoover", temperature=1.0,
        relaxation_time=0.01,
        lj_epsilon=1.0, lj_sigma=1.0, wall_epsilon=1.0, wall_sigma=0.5,
        preset="electrolyte-3-1-desk" if desk else "electrolyte-3-1")


def _dielectric_symmetric() -> ExperimentConfig:
    base = _electrolyte_3_1(desk=True)
    return replace(
        base, gamma_top=0.939, gamma_bottom=0.939,
        dt=5e-3, relaxation_time=0.05,
        n_equil=10_000, n_prod=1_000_000,
        preset="dielectric-symmetric")


_PRESETS = {
    "electrolyte-3-1": (
        _electrolyte_3_1,
        "3:1 primitive-model electrolyte, 750 (+3) / 2250 (-1) ions in "
        "90 x 90 x 30, Bjerrum length 3.5, full-scale step counts"),
    "electrolyte-3-1-desk": (
        _electrolyte_3_1,
        "desk-scale 3:1 electrolyte: 150 (+3) / 450 (-1) ions at the same "
        "density (40.25 x 40.25 x 30), step counts / 100"),
    "dielectric-symmetric": (
        _dielectric_symmetric,
        "desk-scale 3:1 electrolyte between symmetric dielectric "
        "interfaces with contrast 0.939 on both walls"),
}


def list_presets() -> dict[str, str]:
    """Preset names with one-line descriptions."""
    return {name: desc for name, (_, desc) in _PRESETS.items()}


def preset_config(name: str, resolve: bool = True) -> ExperimentConfig:
    """Look up a built-in preset (resolved by default).

    Asymmetric surface-charge systems are intentionally not available:
    their parameter tables are in unavailable supplementary material.
    """
    if name not in _PRESETS:
        raise ValidationError(
            f"unknown preset {name!r}: available {sorted(_PRESETS)}")
    builder, _ = _PRESETS[name]
    if builder is _electrolyte_3_1:
        config = builder(desk=name.endswith("-desk"))
    else:
        config = builder()
    return config.resolve() if resolve else config
