"""Command-line interface: run, energy, validate, analyze, presets.

Every failure exits nonzero after printing a machine-readable JSON error
record (``{"error": <class>, "message": <text>}``) to stderr, so scripted
callers never have to scrape tracebacks.  ``--threads`` (default from the
``SLABEWALD_THREADS`` environment variable, else 1) is exported to the
numerical backends; only single-threaded runs are bitwise reproducible.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

THREADS_ENV_VAR = "SLABEWALD_THREADS"

_THREAD_BACKEND_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS")


def _apply_threads(count: int) -> None:
    if count < 1:
        from .core import ValidationError
        raise ValidationError(f"--threads must be >= 1, got {count}")
    for name in _THREAD_BACKEND_VARS:
        os.environ[name] = str(count)


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return int(raw)
    except ValueError:
        return 1


def _load_config(args):
    """Resolve the experiment config from --preset and/or --config."""
    from .config import parse_config, preset_config
    from .core import ValidationError

    if args.config is not None and args.preset is not None:
        raise ValidationError(
            "--config and --preset are mutually exclusive; write the "
            "preset out with `presets --preset NAME --out FILE` and edit it")
    if args.config is not None:
        config = parse_config(args.config)
    elif args.preset is not None:
        config = preset_config(args.preset)
    else:
        raise ValidationError("provide --config FILE or --preset NAME")
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    return config


def _echo(config) -> dict:
    """The resolved-parameter echo included in summaries and stdout."""
    from .config import config_hash
    return {
        "preset": config.preset,
        "n_particles": config.n_particles,
        "alpha": config.alpha,
        "lz": config.lz,
        "n_levels": config.n_levels,
        "r_cut": config.r_cut,
        # erfc(alpha r_c) ~ size of the neglected real-space tail; raise
        # alpha or r_cut if this is above the accuracy you need
        "real_space_truncation_estimate": math.erfc(config.alpha
                                                    * config.r_cut),
        "force_mode": config.force_mode,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "config_hash": config_hash(config).hex(),
    }


def _jsonable(value: float):
    """Strict JSON has no NaN/inf; map them to null."""
    return value if math.isfinite(value) else None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    from .config import config_hash
    from .engine import run_simulation
    from .trajectory import TrajectoryWriter

    config = _load_config(args)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    traj_path = os.path.join(out_dir, config.trajectory_path)
    summary_path = os.path.join(out_dir, config.summary_path)

    system = config.build_system()
    run = config.run_config()
    with TrajectoryWriter(traj_path, system.n, config.seed,
                          config_hash(config), run.geometry) as writer:
        summary = run_simulation(system, run, sinks=(writer,),
                                 keep_frames=False)
        frames_written = writer.frames_written

    record = {
        "resolved": _echo(config),
        "threads": args.threads,
        "n_steps": summary.n_steps,
        "frames_written": frames_written,
        "mean_temperature_equil": _jsonable(summary.mean_temperature_equil),
        "mean_temperature_prod": _jsonable(summary.mean_temperature_prod),
        "wall_time_seconds": summary.wall_time,
        "seconds_per_step": summary.seconds_per_step,
        "trajectory": traj_path,
    }
    with open(summary_path, "w") as handle:
        json.dump(record, handle, indent=2)
        handle.write("\n")
    print(json.dumps(record, indent=2))
    return 0


def cmd_energy(args) -> int:
    from .core import STREAM_SAMPLER, RngHandle
    from .engine import single_point_energy
    from .fourier import ibc_energy_force
    from .realspace import build_neighbor_list, real_space_energy_force
    from .reference import Ewald2DParams, dielectric_reference_energy, total_energy_2d
    from .sampler import ModeSampler, rbe_energy_fourier

    config = _load_config(args)
    system = config.build_system()
    run = config.run_config()
    reformulated = single_point_energy(system, run)
    coupling = run.coulomb_coupling
    report: dict = {"resolved": _echo(config),
                    "reformulated": dict(reformulated.as_dict(),
                                         total=reformulated.total)}

    spec = config.dielectric_spec()
    if system.n <= args.reference_limit:
        params = Ewald2DParams.for_tolerance(
            config.alpha, system.geometry, tolerance=1e-12)
        if spec is None:
            reference = coupling * total_energy_2d(system, params).total
        else:
            reference = coupling * dielectric_reference_energy(
                system, spec, params)
        coulomb = reformulated.coulomb
        denom = max(abs(reference), 1.0)
        report["reference"] = {
            "method": "ewald2d",
            "coulomb_total": reference,
            "relative_difference": abs(coulomb - reference) / denom,
            "tolerance_budget": config.tolerance,
        }
    else:
        report["reference"] = {
            "skipped": f"N = {system.n} exceeds --reference-limit "
                       f"{args.reference_limit} (the exact pairwise sum "
                       "is quadratic in N)"}

    geometry = run.geometry
    full_system = system
    if geometry is not system.geometry:
        from .core import ParticleSystem
        full_system = ParticleSystem(geometry, system.positions,
                                     system.charges, system.masses,
                                     system.species)
    sampler = ModeSampler(geometry, config.alpha, config.batch_size,
                          RngHandle(config.seed, STREAM_SAMPLER))
    estimates = np.empty(args.batches)
    for index in range(args.batches):
        estimates[index] = rbe_energy_fourier(full_system, spec,
                                              config.alpha,
                                              sampler.sample_batch())
    from .core import DielectricSpec
    pair_spec = spec if spec is not None else DielectricSpec()
    nlist = build_neighbor_list(full_system, config.r_cut)
    u_real = real_space_energy_force(full_system, pair_spec, config.alpha,
                                     nlist)[0]
    u_ibc = ibc_energy_force(full_system, spec)[0]
    rbe_coulomb = coupling * (u_real + estimates.mean() + u_ibc)
    report["rbe_mean"] = {
        "method": "rbe-mean",
        "batches": args.batches,
        "coulomb_total": rbe_coulomb,
        "stderr": coupling * float(estimates.std(ddof=1)
                                   / math.sqrt(args.batches)),
    }
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as handle:
            handle.write(text + "\n")
    print(text)
    return 0


def _suite_oracle_homogeneous() -> list:
    from .core import ParticleSystem, SlabGeometry
    from .engine import RunConfig, single_point_energy
    from .core import SplittingParams
    from .reference import Ewald2DParams, total_energy_2d

    geometry = SlabGeometry(10.0, 10.0, 2.0)
    rng = np.random.default_rng(0)
    checks = []
    for trial in range(5):
        positions = rng.uniform([0, 0, 0.2], [10, 10, 1.8], size=(16, 3))
        system = ParticleSystem(geometry, positions,
                                np.repeat([1.0, -1.0], 8))
        config = RunConfig(dt=1e-3, n_equil=0, n_prod=0,
                           splitting=SplittingParams(1.2, 3.5,
                                                     tolerance=1e-8))
        total = single_point_energy(system, config).coulomb
        exact = total_energy_2d(
            system, Ewald2DParams.for_tolerance(1.2, geometry, 1e-12)).total
        rel = abs(total - exact) / abs(exact)
        checks.append((f"neutral config {trial}: relative error", rel < 1e-6,
                       f"{rel:.3e}"))
    return checks


def _suite_oracle_dielectric() -> list:
    from .core import DielectricSpec, ParticleSystem, SlabGeometry
    from .fourier import choose_lz, dielectric_fourier_energy, ibc_energy_force, mode_cutoff
    from .realspace import build_neighbor_list, real_space_energy_force
    from .reference import Ewald2DParams, dielectric_reference_energy

    spec = DielectricSpec.symmetric(0.9, n_levels=8)
    open_box = SlabGeometry(10.0, 10.0, 2.0)
    geometry = SlabGeometry(10.0, 10.0, 2.0,
                            lz=choose_lz(open_box, 1.2, 1e-8,
                                         n_levels=spec.n_levels))
    rng = np.random.default_rng(1)
    checks = []
    for trial in range(2):
        positions = rng.uniform([0, 0, 0.2], [10, 10, 1.8], size=(12, 3))
        system = ParticleSystem(geometry, positions,
                                np.repeat([1.0, -1.0], 6))
        nlist = build_neighbor_list(system, 3.5)
        u = (real_space_energy_force(system, spec, 1.2, nlist)[0]
             + dielectric_fourier_energy(system, spec, 1.2,
                                         mode_cutoff(geometry, 1.2, 1e-10))
             + ibc_energy_force(system, spec)[0])
        exact = dielectric_reference_energy(
            system, spec, Ewald2DParams.for_tolerance(1.2, geometry, 1e-12))
        rel = abs(u - exact) / abs(exact)
        checks.append((f"dielectric config {trial}: relative error",
                       rel < 1e-5, f"{rel:.3e}"))
    return checks


def _suite_sampler() -> list:
    from .core import STREAM_SAMPLER, RngHandle, SlabGeometry
    from .sampler import ModeSampler
    from scipy import stats

    geometry = SlabGeometry(10.0, 8.0, 2.0, lz=12.0)
    alpha = 1.0
    sampler = ModeSampler(geometry, alpha, 1000,
                          RngHandle(101, STREAM_SAMPLER), thin=8)
    draws = np.concatenate([sampler.sample_batch().ints
                            for _ in range(200)])
    ns = np.arange(-30, 31)
    axis_weights = []
    for length in (geometry.lx, geometry.ly, geometry.lz):
        k = 2 * np.pi * ns / length
        axis_weights.append(np.exp(-k**2 / (4 * alpha**2)))
    wx, wy, wz = axis_weights
    joint_x = wx * wy.sum() * wz.sum()
    joint_x[ns == 0] -= 1.0  # the excluded zero triple sits in this slice
    observed = np.array([(draws[:, 0] == n).sum() for n in ns])
    expected = joint_x / joint_x.sum() * observed.sum()
    keep = expected >= 10
    observed_b = np.append(observed[keep], observed[~keep].sum())
    expected_b = np.append(expected[keep], expected[~keep].sum())
    expected_b *= observed_b.sum() / expected_b.sum()
    p_value = stats.chisquare(observed_b, expected_b).pvalue
    zero_rows = int((np.all(draws == 0, axis=1)).sum())
    return [
        ("chi-squared p-value of marginal distribution", p_value > 0.01,
         f"p = {p_value:.4f} on {len(draws)} draws"),
        ("zero mode never sampled", zero_rows == 0, f"{zero_rows} hits"),
        ("acceptance rate in working band",
         0.15 < sampler.acceptance_rate < 0.7,
         f"{sampler.acceptance_rate:.3f}"),
    ]


def _suite_engine() -> list:
    from .core import ParticleSystem, SlabGeometry, SplittingParams
    from .engine import RunConfig, ThermostatConfig, run_simulation
    from .realspace import LJParams, WallParams

    geometry = SlabGeometry(8.0, 8.0, 4.0, lz=14.0)
    rng = np.random.default_rng(0)
    positions = rng.uniform([0, 0, 1], [8, 8, 3], size=(16, 3))
    system = ParticleSystem(geometry, positions, np.repeat([1.0, -1.0], 8))
    config = RunConfig(
        dt=2e-3, n_equil=5, n_prod=25, sample_every=5, force_mode="rbe",
        batch_size=16, seed=3,
        splitting=SplittingParams(0.8, 2.8, tolerance=1e-7),
        thermostat=ThermostatConfig("langevin", 1.0, friction=1.0),
        lj=LJParams(1.0, 1.0), walls=WallParams(1.0, 0.5))
    first = run_simulation(system, config)
    second = run_simulation(system, config)
    bitwise = all(
        np.array_equal(a.positions, b.positions)
        and np.array_equal(a.velocities, b.velocities)
        for a, b in zip(first.frames, second.frames))
    finite = all(np.isfinite(f.energy.total) for f in first.frames)
    return [
        ("equal seeds give bitwise-identical trajectories", bitwise,
         f"{len(first.frames)} frames compared"),
        ("frame energies finite", finite, ""),
    ]


_SUITES = {
    "oracle-homogeneous": _suite_oracle_homogeneous,
    "oracle-dielectric": _suite_oracle_dielectric,
    "sampler": _suite_sampler,
    "engine": _suite_engine,
}


def cmd_validate(args) -> int:
    from .core import ValidationError

    if args.suite == "all":
        names = list(_SUITES)
    elif args.suite in _SUITES:
        names = [args.suite]
    else:
        raise ValidationError(
            f"unknown suite {args.suite!r}: available "
            f"{sorted(_SUITES) + ['all']}")
    failures = 0
    width = 58
    for name in names:
        print(f"[{name}]")
        for label, passed, detail in _SUITES[name]():
            status = "PASS" if passed else "FAIL"
            failures += 0 if passed else 1
            suffix = f"  ({detail})" if detail else ""
            print(f"  {label:<{width}} {status}{suffix}")
    print(f"{'all checks passed' if failures == 0 else f'{failures} check(s) failed'}")
    return 0 if failures == 0 else 1


def cmd_analyze(args) -> int:
    from .analysis import (concentration_profile, energy_histogram, msd,
                           vacf, w2_distance, write_csv)
    from .config import config_hash, parse_config
    from .core import ValidationError
    from .trajectory import read_trajectory

    traj = read_trajectory(args.traj)
    species_mask = None
    if args.config is not None:
        config = parse_config(args.config)
        if config_hash(config) != traj.config_hash:
            raise ValidationError(
                "config hash mismatch: the trajectory was not produced by "
                "this configuration (tampered file or wrong config)")
        if args.species is not None:
            species_mask = config.species_mask(args.species)
    elif args.species is not None:
        raise ValidationError("--species needs --config to map names")

    if not traj.frames:
        raise ValidationError("trajectory holds no frames")
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, f"{args.what}.csv")

    if args.what == "profile":
        hist = concentration_profile(traj.frames, traj.geometry,
                                     species=species_mask, bins=args.bins)
        write_csv(out_path, ["z_center", "number_density"],
                  [hist.centers, hist.counts])
    elif args.what == "msd":
        lag, values = msd(traj.frames, axis=args.axis)
        write_csv(out_path, ["lag_time", "msd"], [lag, values])
    elif args.what == "vacf":
        lag, values = vacf(traj.frames)
        write_csv(out_path, ["lag_time", "vacf"], [lag, values])
    elif args.what == "energy-hist":
        hist = energy_histogram(traj.frames, bins=args.bins)
        write_csv(out_path, ["energy_center", "probability"],
                  [hist.centers, hist.counts])
    else:
        raise ValidationError(f"unknown analysis {args.what!r}")
    print(out_path)
    return 0


def cmd_presets(args) -> int:
    from .config import list_presets, preset_config

    if args.preset is None:
        for name, description in list_presets().items():
            print(f"{name:<24} {description}")
        print("note: asymmetric surface-charge systems are not provided; "
              "their parameter tables live in unavailable supplementary "
              "material")
        return 0
    config = preset_config(args.preset)
    text = config.to_toml()
    if args.out:
        with open(args.out, "w") as handle:
            handle.write(text)
        print(args.out)
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slabewald",
        description="Electrostatics and MD for slab-confined charges.")
    parser.add_argument(
        "--threads", type=int, default=_default_threads(),
        help=f"worker threads for numerical backends (default from "
             f"${THREADS_ENV_VAR}, else 1; only 1 is bitwise reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, with_seed=True):
        p.add_argument("--config", help="experiment TOML file")
        p.add_argument("--preset", help="built-in preset name")
        if with_seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")

    p_run = sub.add_parser("run", help="simulate and persist a trajectory")
    add_config_flags(p_run)
    p_run.add_argument("--out", help="output directory (default: .)")
    p_run.set_defaults(func=cmd_run)

    p_energy = sub.add_parser(
        "energy", help="single-point energies: reference, reformulated, "
                       "batch-averaged")
    add_config_flags(p_energy)
    p_energy.add_argument("--batches", type=int, default=200,
                          help="batches for the stochastic mean (default 200)")
    p_energy.add_argument("--reference-limit", type=int, default=128,
                          help="largest N for the exact pairwise reference")
    p_energy.add_argument("--out", help="also write the JSON report here")
    p_energy.set_defaults(func=cmd_energy)

    p_validate = sub.add_parser("validate",
                                help="run an invariant suite, print a table")
    p_validate.add_argument("suite", nargs="?", default="all",
                            help=f"{sorted(_SUITES) + ['all']}")
    p_validate.set_defaults(func=cmd_validate)

    p_analyze = sub.add_parser("analyze", help="trajectory to CSV tables")
    p_analyze.add_argument("--traj", required=True, help="trajectory file")
    p_analyze.add_argument("--what", required=True,
                           choices=["profile", "msd", "vacf", "energy-hist"])
    p_analyze.add_argument("--config",
                           help="config for hash check and species names")
    p_analyze.add_argument("--species", help="restrict profile to a species")
    p_analyze.add_argument("--axis", default="all",
                           choices=["x", "y", "z", "all"],
                           help="MSD axis (default all)")
    p_analyze.add_argument("--bins", type=int, default=50)
    p_analyze.add_argument("--out", help="output directory (default: .)")
    p_analyze.set_defaults(func=cmd_analyze)

    p_presets = sub.add_parser("presets",
                               help="list presets or print one as TOML")
    p_presets.add_argument("--preset", help="print this preset")
    p_presets.add_argument("--out", help="write the TOML here instead")
    p_presets.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args.threads)
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # noqa: BLE001 - the CLI boundary
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
