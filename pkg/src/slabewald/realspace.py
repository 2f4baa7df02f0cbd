"""Linear-scaling short-range interactions: screened Coulomb, LJ, walls.

The real-space half of the Ewald split — erfc(alpha r)/r pairs within a
cutoff — plus the purely repulsive shifted-truncated Lennard-Jones pair
potential and the confining walls at z = 0 and z = h.

Under dielectric confinement each particle also interacts with the nearby
image charges of itself and its neighbors.  Images are generated on the
fly per pair (never stored), and a distance bound makes the actual-pair
neighbor list sufficient: every image of particle j is at least as far
from particle i as j itself (images displace only in z, away from the
slab), so any actual pair outside the cutoff has all its image pairs
outside too.  Only image levels whose minimum approach distance can reach
the cutoff are visited.

Forces are exact gradients of the truncated energy, including the chain
rule through a particle's *own* image positions: odd image levels co-move
with dz_image/dz = -1, so odd-level cross terms are z-reflected rather
than Newton-opposite, and a particle's interaction with its own odd
images yields the full field force (the 1/2 energy prefactor cancels
against the factor-2 co-motion).  The finite-difference oracle in
:mod:`slabewald.reference` pins this down in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import erfc

from .core import (
    DielectricSpec,
    EscapeError,
    ParticleSystem,
    SingularityError,
    SlabGeometry,
    ValidationError,
    image_factor,
    min_image_xy,
)

_SQRT_PI = math.sqrt(math.pi)
_MIN_SEPARATION = 1e-10


# ---------------------------------------------------------------------------
# neighbor list
# ---------------------------------------------------------------------------

@dataclass
class NeighborList:
    """Verlet pair list with a rebuild skin.

    ``pairs`` holds every unordered pair (i < j, lexicographically sorted)
    whose minimum-image separation is at most ``cell_size`` = r_cut + skin.
    The list stays valid until some particle has moved more than skin/2
    from the positions it was built at; ``needs_rebuild`` checks that and
    ``generation`` counts rebuilds.
    """

    r_cut: float
    skin: float
    cell_size: float
    pairs: np.ndarray
    generation: int = 0
    ref_positions: np.ndarray = field(default=None, repr=False)

    _per_particle: dict = field(default=None, repr=False, compare=False)

    def neighbors_of(self, i: int) -> np.ndarray:
        """Indices paired with particle ``i`` (either pair slot)."""
        if self._per_particle is None:
            table: dict[int, list] = {}
            for a, b in self.pairs:
                table.setdefault(int(a), []).append(int(b))
                table.setdefault(int(b), []).append(int(a))
            object.__setattr__(self, "_per_particle",
                               {k: np.array(sorted(v)) for k, v in table.items()})
        return self._per_particle.get(i, np.empty(0, dtype=int))

    def needs_rebuild(self, system: ParticleSystem) -> bool:
        d = min_image_xy(system.positions - self.ref_positions, system.geometry)
        max_move = float(np.sqrt((d * d).sum(axis=1).max())) if d.size else 0.0
        return max_move > 0.5 * self.skin


def build_neighbor_list(
    system: ParticleSystem, r_cut: float, skin: float | None = None
) -> NeighborList:
    """Build the pair list covering separations up to r_cut + skin.

    The xy axes use minimum image; z is open.  Requires
    r_cut + skin < min(lx, ly)/2 so the minimum image is unambiguous.
    Spatial hashing is delegated to a periodic KD-tree (z made trivially
    periodic with a period far above any reachable coordinate).
    """
    g = system.geometry
    if skin is None:
        skin = 0.3 * r_cut
    if r_cut <= 0 or skin < 0:
        raise ValidationError(f"need r_cut > 0 and skin >= 0, got {r_cut}, {skin}")
    reach = r_cut + skin
    if not reach < min(g.lx, g.ly) / 2:
        raise ValidationError(
            f"r_cut + skin = {reach} must be below half the smallest periodic "
            f"box length {min(g.lx, g.ly) / 2}"
        )
    # fake z period far beyond the slab: wrapping there can never matter
    z_period = 1e6 * max(g.h, reach)
    tree = cKDTree(system.positions, boxsize=[g.lx, g.ly, z_period])
    pair_set = tree.query_pairs(reach, output_type="ndarray")
    if pair_set.size:
        pair_set = np.sort(pair_set, axis=1)
        order = np.lexsort((pair_set[:, 1], pair_set[:, 0]))
        pair_set = pair_set[order]
    else:
        pair_set = pair_set.reshape(0, 2)
    return NeighborList(
        r_cut=r_cut, skin=skin, cell_size=reach, pairs=pair_set,
        generation=0, ref_positions=system.positions.copy(),
    )


def refresh_neighbor_list(nlist: NeighborList, system: ParticleSystem) -> NeighborList:
    """Rebuild in place when any particle moved more than skin/2."""
    if nlist.needs_rebuild(system):
        fresh = build_neighbor_list(system, nlist.r_cut, nlist.skin)
        nlist.pairs = fresh.pairs
        nlist.ref_positions = fresh.ref_positions
        nlist.generation += 1
        nlist._per_particle = None
    return nlist


# ---------------------------------------------------------------------------
# screened Coulomb with on-the-fly images
# ---------------------------------------------------------------------------

def _pair_geometry(system: ParticleSystem, nlist: NeighborList):
    """Ordered pair indices (both directions of each list pair, then the
    self pairs) and their minimum-image xy displacements."""
    pairs = nlist.pairs
    n = system.n
    i_idx = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    j_idx = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    d = system.positions[i_idx] - system.positions[j_idx]
    d = min_image_xy(d, system.geometry)
    return i_idx, j_idx, d


def real_space_energy_force(
    system: ParticleSystem,
    spec: DielectricSpec,
    alpha: float,
    nlist: NeighborList,
) -> tuple[float, np.ndarray]:
    """Short-range Coulomb energy and forces, truncated at the list cutoff.

    actual-actual:  sum over pairs of q_i q_j erfc(alpha r)/r
    actual-image:   1/2 sum over ordered pairs (self included) and image
                    levels of q_i gamma^(l) q_j erfc(alpha r)/r

    Forces are the exact negative gradients of that truncated sum with
    respect to actual-particle coordinates (images are sources only; the
    gradient of a particle's own image positions is what the chain-rule
    terms handle).  Returns (energy, forces[n, 3]).
    """
    g = system.geometry
    q = system.charges
    pos = system.positions
    n = system.n
    r_cut = nlist.r_cut
    forces = np.zeros((n, 3))
    energy_parts = []

    pairs = nlist.pairs
    if pairs.size:
        i0, j0 = pairs[:, 0], pairs[:, 1]
        d = min_image_xy(pos[i0] - pos[j0], g)
        r2 = (d * d).sum(axis=1)
        within = r2 <= r_cut * r_cut
        if np.any(r2[within] < _MIN_SEPARATION**2):
            raise SingularityError("overlapping charges inside the cutoff")
        i0, j0, d, r2 = i0[within], j0[within], d[within], r2[within]
        r = np.sqrt(r2)
        qq = q[i0] * q[j0]
        er = erfc(alpha * r)
        energy_parts.append(float(np.sum(qq * er / r)))
        # -d/dr [erfc(ar)/r] / r  =  erfc(ar)/r^3 + 2a e^{-a^2 r^2}/(sqrt(pi) r^2)
        k = qq * (er / (r2 * r) + (2.0 * alpha / _SQRT_PI)
                  * np.exp(-(alpha * r) ** 2) / r2)
        fx = k[:, None] * d
        np.add.at(forces, i0, fx)
        np.add.at(forces, j0, -fx)

    if not (spec.is_homogeneous or spec.n_levels == 0):
        i_idx, j_idx, d_all = _pair_geometry(system, nlist)
        rho2 = d_all[:, 0] ** 2 + d_all[:, 1] ** 2
        qq_all = q[i_idx] * q[j_idx]
        zi = pos[i_idx, 2]
        zj = pos[j_idx, 2]
        h = g.h
        for level in range(1, spec.n_levels + 1):
            # minimum approach of level-l images (spec'd conservative bound)
            if 2 * (level // 2) * h - r_cut > h:
                continue
            parity = -1.0 if level % 2 else 1.0
            for branch in (+1, -1):
                gamma = image_factor(level, branch, spec.gamma_top,
                                     spec.gamma_bottom, spec.convention)
                if gamma == 0.0:
                    continue
                if branch == +1:
                    z_img = parity * zj + 2 * ((level + 1) // 2) * h
                else:
                    z_img = parity * zj - 2 * (level // 2) * h
                dz = zi - z_img
                r2 = rho2 + dz * dz
                within = r2 <= r_cut * r_cut
                if not np.any(within):
                    continue
                r = np.sqrt(r2[within])
                qqw = qq_all[within]
                er = erfc(alpha * r)
                energy_parts.append(0.5 * gamma * float(np.sum(qqw * er / r)))
                k = 0.5 * gamma * qqw * (
                    er / (r2[within] * r)
                    + (2.0 * alpha / _SQRT_PI) * np.exp(-(alpha * r) ** 2) / r2[within]
                )
                dvec = np.column_stack([d_all[within, 0], d_all[within, 1],
                                        dz[within]])
                fi = k[:, None] * dvec
                np.add.at(forces, i_idx[within], fi)
                # source side: xy like Newton; z through the image's motion
                fj = -fi.copy()
                fj[:, 2] = -parity * fi[:, 2]
                np.add.at(forces, j_idx[within], fj)

    return math.fsum(energy_parts), forces


# ---------------------------------------------------------------------------
# Lennard-Jones and walls
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LJParams:
    """Purely repulsive shifted-truncated Lennard-Jones:

    U(r) = 4 eps [(sigma/r)^12 - (sigma/r)^6 + 1/4]   for r <= 2^(1/6) sigma
         = 0                                          beyond.
    """

    epsilon_lj: float
    sigma: float

    def __post_init__(self) -> None:
        if self.epsilon_lj < 0 or self.sigma <= 0:
            raise ValidationError("need epsilon_lj >= 0 and sigma > 0")

    @property
    def r_lj(self) -> float:
        return 2.0 ** (1.0 / 6.0) * self.sigma


@dataclass(frozen=True)
class WallParams:
    """Flat repulsive walls at z = 0 and z = h, same shifted-truncated 12-6
    form applied to the particle-wall distance."""

    epsilon_wall: float
    sigma_wall: float

    def __post_init__(self) -> None:
        if self.epsilon_wall < 0 or self.sigma_wall <= 0:
            raise ValidationError("need epsilon_wall >= 0 and sigma_wall > 0")

    @property
    def r_wall(self) -> float:
        return 2.0 ** (1.0 / 6.0) * self.sigma_wall

    @classmethod
    def matched(cls, lj: LJParams) -> "WallParams":
        """Walls matched to the fluid: same energy scale, half the size."""
        return cls(epsilon_wall=lj.epsilon_lj, sigma_wall=0.5 * lj.sigma)


def _lj_pair(r2: np.ndarray, epsilon: float, sigma: float):
    """(energy, -dU/dr / r) for the shifted-truncated 12-6 at squared
    distances already inside the cutoff."""
    s2 = (sigma * sigma) / r2
    s6 = s2 * s2 * s2
    u = 4.0 * epsilon * (s6 * s6 - s6 + 0.25)
    k = 24.0 * epsilon * (2.0 * s6 * s6 - s6) / r2
    return u, k


def lj_and_wall_energy_force(
    system: ParticleSystem,
    lj: LJParams,
    wall: WallParams,
    nlist: NeighborList,
) -> tuple[float, float, np.ndarray]:
    """Shifted-truncated LJ pairs plus wall repulsion.

    Returns (u_lj, u_wall, forces).  Raises :class:`EscapeError` when a
    particle sits outside the slab beyond the wall interaction range
    (the walls can no longer push it back).
    """
    z = system.positions[:, 2]
    h = system.geometry.h
    if np.any(z < -wall.r_wall) or np.any(z > h + wall.r_wall):
        worst = int(np.argmax(np.maximum(-z, z - h)))
        raise EscapeError(
            f"particle {worst} at z = {z[worst]:.6g} is beyond wall range "
            f"[{-wall.r_wall:.6g}, {h + wall.r_wall:.6g}]"
        )

    if lj.r_lj > nlist.cell_size:
        raise ValidationError(
            f"LJ range {lj.r_lj:.6g} exceeds the neighbor-list coverage "
            f"{nlist.cell_size:.6g}"
        )
    n = system.n
    forces = np.zeros((n, 3))
    u_lj = 0.0
    pairs = nlist.pairs
    if pairs.size and lj.epsilon_lj > 0:
        i0, j0 = pairs[:, 0], pairs[:, 1]
        d = min_image_xy(system.positions[i0] - system.positions[j0],
                         system.geometry)
        r2 = (d * d).sum(axis=1)
        within = r2 <= lj.r_lj**2
        if np.any(within):
            if np.any(r2[within] < _MIN_SEPARATION**2):
                raise SingularityError("overlapping particles in LJ sum")
            u, k = _lj_pair(r2[within], lj.epsilon_lj, lj.sigma)
            u_lj = float(np.sum(u))
            f = k[:, None] * d[within]
            np.add.at(forces, i0[within], f)
            np.add.at(forces, j0[within], -f)

    u_wall = 0.0
    if wall.epsilon_wall > 0:
        for dist, sign in ((z, +1.0), (h - z, -1.0)):
            within = (dist > 0) & (dist <= wall.r_wall)
            if np.any(within):
                u, k = _lj_pair(dist[within] ** 2, wall.epsilon_wall,
                                wall.sigma_wall)
                u_wall += float(np.sum(u))
                forces[within, 2] += sign * k * dist[within]
            # a particle exactly past a wall but within range: strong push back
            past = dist <= 0
            if np.any(past):
                raise EscapeError("particle exactly on or past a wall plane")

    return u_lj, u_wall, forces
