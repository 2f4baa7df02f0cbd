"""Binary trajectory persistence.

Fixed-layout little-endian format, one header then densely packed frame
records, so any frame is seekable by offset arithmetic:

* header (88 bytes): magic ``b"SLABEWTR"``, format version (u32),
  particle count (u32), run seed (u64), 32-byte config fingerprint, and
  the resolved box ``lx, ly, h, lz`` (4 x f64);
* frame (88 + 48 N bytes): step (u64), time (f64), particle count echo
  (u32), energy-method code (u32), positions (3N x f64), velocities
  (3N x f64), the seven energy terms (f64 each), and the instantaneous
  temperature (f64).

Floats are written verbatim (IEEE-754 doubles), so a write/read cycle
reproduces every frame bitwise.  The reader rejects foreign magic,
version mismatches, truncated frames, and in-frame particle-count
disagreements.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import EnergyBreakdown, SlabGeometry, ValidationError
from .engine import TrajectoryFrame

__all__ = ["TrajectoryFile", "TrajectoryWriter", "read_trajectory"]

_MAGIC = b"SLABEWTR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sII Q 32s dddd")
_FRAME_FIXED = struct.Struct("<QdII")
_ENERGY_TAIL = struct.Struct("<8d")  # seven energy terms + temperature

_METHOD_CODES = {"ewald2d": 0, "ewald3d+ibc": 1, "rbe-mean": 2}
_CODE_METHODS = {code: name for name, code in _METHOD_CODES.items()}
_OTHER_METHOD = 255


def _frame_size(n_particles: int) -> int:
    return _FRAME_FIXED.size + 48 * n_particles + _ENERGY_TAIL.size


@dataclass(frozen=True)
class TrajectoryFile:
    """A fully read trajectory: header fields plus decoded frames."""

    version: int
    n_particles: int
    seed: int
    config_hash: bytes
    geometry: SlabGeometry
    frames: tuple


class TrajectoryWriter:
    """Streams frames to disk; usable directly as a run sink.

    Opens on construction, finalizes on :meth:`close` (or context exit);
    calling the instance writes one frame, which is what the run loop
    expects of its sinks.
    """

    def __init__(self, path, n_particles: int, seed: int,
                 config_hash: bytes, geometry: SlabGeometry):
        if len(config_hash) != 32:
            raise ValidationError("config hash must be 32 bytes")
        if geometry.lz is None:
            raise ValidationError("trajectory headers need the resolved lz")
        if n_particles < 1:
            raise ValidationError("n_particles must be >= 1")
        if seed < 0:
            raise ValidationError("seed must be non-negative")
        self.n_particles = n_particles
        self._handle = open(path, "wb")
        self.frames_written = 0
        self._handle.write(_HEADER.pack(
            _MAGIC, FORMAT_VERSION, n_particles, seed, config_hash,
            geometry.lx, geometry.ly, geometry.h, geometry.lz))

    def __call__(self, frame: TrajectoryFrame) -> None:
        self.write_frame(frame)

    def write_frame(self, frame: TrajectoryFrame) -> None:
        if self._handle.closed:
            raise ValidationError("trajectory writer is closed")
        n = frame.positions.shape[0]
        if n != self.n_particles:
            raise ValidationError(
                f"frame has {n} particles, header says {self.n_particles}")
        code = _METHOD_CODES.get(frame.energy.method, _OTHER_METHOD)
        self._handle.write(_FRAME_FIXED.pack(frame.step, frame.time, n, code))
        self._handle.write(np.ascontiguousarray(
            frame.positions, dtype="<f8").tobytes())
        self._handle.write(np.ascontiguousarray(
            frame.velocities, dtype="<f8").tobytes())
        e = frame.energy
        self._handle.write(_ENERGY_TAIL.pack(
            e.u_real, e.u_fourier, e.u_self, e.u_ibc, e.u_elc,
            e.u_lj, e.u_wall, frame.temperature))
        self.frames_written += 1

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "TrajectoryWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_trajectory(path) -> TrajectoryFile:
    """Decode a trajectory file, validating structure as it goes."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < _HEADER.size:
        raise ValidationError(f"{path}: too short to hold a header")
    (magic, version, n_particles, seed, config_hash,
     lx, ly, h, lz) = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise ValidationError(f"{path}: not a trajectory file (bad magic)")
    if version != FORMAT_VERSION:
        raise ValidationError(
            f"{path}: format version {version} unsupported "
            f"(reader supports {FORMAT_VERSION})")
    geometry = SlabGeometry(lx, ly, h, lz=lz)
    body = blob[_HEADER.size:]
    frame_size = _frame_size(n_particles)
    if len(body) % frame_size != 0:
        raise ValidationError(
            f"{path}: truncated frame ({len(body)} bytes is not a multiple "
            f"of the {frame_size}-byte frame record)")
    frames = []
    vec_bytes = 24 * n_particles
    for offset in range(0, len(body), frame_size):
        step, time, n, code = _FRAME_FIXED.unpack_from(body, offset)
        if n != n_particles:
            raise ValidationError(
                f"{path}: frame at byte {offset + _HEADER.size} reports "
                f"{n} particles, header says {n_particles}")
        cursor = offset + _FRAME_FIXED.size
        positions = np.frombuffer(
            body, dtype="<f8", count=3 * n_particles,
            offset=cursor).reshape(n_particles, 3).copy()
        cursor += vec_bytes
        velocities = np.frombuffer(
            body, dtype="<f8", count=3 * n_particles,
            offset=cursor).reshape(n_particles, 3).copy()
        cursor += vec_bytes
        tail = _ENERGY_TAIL.unpack_from(body, cursor)
        energy = EnergyBreakdown(*tail[:7],
                                 method=_CODE_METHODS.get(code, ""))
        frames.append(TrajectoryFrame(step, time, positions, velocities,
                                      energy, tail[7]))
    return TrajectoryFile(version, n_particles, seed, config_hash,
                          geometry, tuple(frames))
