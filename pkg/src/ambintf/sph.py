"""Real spherical harmonics, steering vectors, DOA grids and angular geometry.

Conventions used throughout the package:

* real-valued spherical harmonics with N3D (orthonormal-family) scaling and
  no Condon-Shortley phase,
* ACN channel ordering, i.e. channel index ``n**2 + n + m``,
* directions as (colatitude, azimuth) with colatitude 0 at the +z pole.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import lpmv

TWO_PI = 2.0 * np.pi

# icosphere subdivision level per supported grid size
_ICOSPHERE_LEVELS = {12: 0, 42: 1, 162: 2, 642: 3}


@dataclass(frozen=True)
class Direction:
    """A direction on the unit sphere.

    Attributes
    ----------
    colatitude : float
        Angle from the +z axis, in [0, pi].
    azimuth : float
        Angle in the xy plane from +x towards +y, normalized into [0, 2*pi).
    """

    colatitude: float
    azimuth: float

    def __post_init__(self):
        if not 0.0 <= self.colatitude <= np.pi:
            raise ValueError(f"colatitude {self.colatitude} outside [0, pi]")
        object.__setattr__(self, "azimuth", float(self.azimuth) % TWO_PI)
        object.__setattr__(self, "colatitude", float(self.colatitude))

    @classmethod
    def from_vector(cls, vec) -> "Direction":
        vec = np.asarray(vec, dtype=float)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ValueError("zero vector has no direction")
        x, y, z = vec / norm
        return cls(math.acos(min(1.0, max(-1.0, z))), math.atan2(y, x))

    def unit_vector(self) -> np.ndarray:
        st = math.sin(self.colatitude)
        return np.array([
            st * math.cos(self.azimuth),
            st * math.sin(self.azimuth),
            math.cos(self.colatitude),
        ])


@dataclass(frozen=True)
class SteeringVector:
    """Frequency-independent SH-domain steering vector for one direction."""

    order: int
    values: np.ndarray

    def __post_init__(self):
        expected = (self.order + 1) ** 2
        if self.values.shape != (expected,):
            raise ValueError(
                f"steering vector for order {self.order} must have length "
                f"{expected}, got {self.values.shape}"
            )

    def __array__(self, dtype=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class DoaGrid:
    """Quasi-uniform direction grid with precomputed rank-1 SH kernels."""

    order: int
    directions: list
    steering: np.ndarray = field(repr=False)  # (D, L)
    kernels: np.ndarray = field(repr=False)  # (D, L, L), kernels[d] = y_d y_d^T

    @property
    def n_directions(self) -> int:
        return len(self.directions)

    @property
    def n_channels(self) -> int:
        return (self.order + 1) ** 2

    @cached_property
    def kernel_gram(self) -> np.ndarray:
        """Pairwise kernel inner products tr(Sigma_d Sigma_d') = (y_d.y_d')^2."""
        return (self.steering @ self.steering.T) ** 2


def assoc_legendre(n: int, m: int, x):
    """Associated Legendre polynomial P_n^m(x) without Condon-Shortley phase.

    Parameters
    ----------
    n, m : int
        Degree and order with 0 <= m <= n.
    x : float or ndarray
        Argument(s) in [-1, 1].
    """
    if m < 0 or m > n:
        raise ValueError(f"require 0 <= m <= n, got n={n}, m={m}")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-15):
        raise ValueError("argument outside [-1, 1]")
    # scipy's lpmv carries the (-1)^m Condon-Shortley factor; strip it
    out = (-1.0) ** m * lpmv(m, n, np.clip(x, -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def _sh_norm(n: int, m: int) -> float:
    am = abs(m)
    return math.sqrt(
        (2 * n + 1) * math.factorial(n - am) / math.factorial(n + am)
    )


def real_sh(n: int, m: int, colatitude, azimuth):
    """Real spherical harmonic Y_n^m under N3D scaling.

    Accepts scalars or broadcastable arrays of angles. ``colatitude`` is
    measured from the +z axis.
    """
    if abs(m) > n:
        raise ValueError(f"require |m| <= n, got n={n}, m={m}")
    colatitude = np.asarray(colatitude, dtype=float)
    azimuth = np.asarray(azimuth, dtype=float)
    leg = assoc_legendre(n, abs(m), np.cos(colatitude))
    if m < 0:
        trig = math.sqrt(2.0) * np.sin(abs(m) * azimuth)
    elif m == 0:
        trig = np.ones_like(azimuth) if azimuth.ndim else 1.0
    else:
        trig = math.sqrt(2.0) * np.cos(m * azimuth)
    out = _sh_norm(n, m) * leg * trig
    return float(out) if np.ndim(out) == 0 else out


def acn(n: int, m: int) -> int:
    """ACN channel index of (order n, degree m)."""
    return n * n + n + m


def steering_matrix(order: int, colatitudes, azimuths) -> np.ndarray:
    """Stack steering vectors for many directions, shape (ndir, (order+1)**2)."""
    colatitudes = np.atleast_1d(np.asarray(colatitudes, dtype=float))
    azimuths = np.atleast_1d(np.asarray(azimuths, dtype=float))
    n_dir = colatitudes.shape[0]
    n_ch = (order + 1) ** 2
    out = np.empty((n_dir, n_ch))
    for n in range(order + 1):
        for m in range(-n, n + 1):
            out[:, acn(n, m)] = real_sh(n, m, colatitudes, azimuths)
    return out


def steering_vector(order: int, direction: Direction) -> SteeringVector:
    """SH steering vector in ACN order for a single direction."""
    if order < 0:
        raise ValueError("order must be non-negative")
    values = steering_matrix(order, direction.colatitude, direction.azimuth)[0]
    return SteeringVector(order=order, values=values)


def _icosahedron_vertices() -> np.ndarray:
    g = (1.0 + math.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-g, g):
            verts.append((0.0, a, b))
            verts.append((a, b, 0.0))
            verts.append((b, 0.0, a))
    verts = np.array(verts)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True)


def _icosahedron_faces(verts: np.ndarray) -> list:
    # faces = triples of mutually nearest vertices (edge length is the minimum
    # pairwise distance on the icosahedron)
    dists = np.linalg.norm(verts[:, None, :] - verts[None, :, :], axis=-1)
    edge = np.min(dists[dists > 1e-9])
    adj = dists < edge * 1.01
    faces = set()
    n = len(verts)
    for i in range(n):
        for j in range(i + 1, n):
            if not adj[i, j]:
                continue
            for k in range(j + 1, n):
                if adj[i, k] and adj[j, k]:
                    faces.add((i, j, k))
    return sorted(faces)


def _subdivide(verts: np.ndarray, faces: list):
    verts = list(map(tuple, verts))
    midpoint_cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in midpoint_cache:
            v = np.array(verts[i]) + np.array(verts[j])
            v /= np.linalg.norm(v)
            midpoint_cache[key] = len(verts)
            verts.append(tuple(v))
        return midpoint_cache[key]

    new_faces = []
    for (a, b, c) in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(verts), new_faces


def build_doa_grid(order: int, target_d: int) -> DoaGrid:
    """Icosphere DOA grid with rank-1 kernels y_d y_d^T.

    ``target_d`` must be one of the icosphere vertex counts 12, 42, 162, 642.
    """
    if target_d not in _ICOSPHERE_LEVELS:
        raise ValueError(
            f"unsupported grid size {target_d}; choose one of "
            f"{sorted(_ICOSPHERE_LEVELS)}"
        )
    verts = _icosahedron_vertices()
    faces = _icosahedron_faces(verts)
    for _ in range(_ICOSPHERE_LEVELS[target_d]):
        verts, faces = _subdivide(verts, faces)
    assert len(verts) == target_d
    directions = [Direction.from_vector(v) for v in verts]
    colats = np.array([d.colatitude for d in directions])
    azs = np.array([d.azimuth for d in directions])
    steering = steering_matrix(order, colats, azs)
    kernels = steering[:, :, None] * steering[:, None, :]
    return DoaGrid(order=order, directions=directions, steering=steering,
                   kernels=kernels)


def angular_error(d1: Direction, d2: Direction) -> float:
    """Angle between two directions in degrees, in [0, 180]."""
    cosang = float(np.dot(d1.unit_vector(), d2.unit_vector()))
    return math.degrees(math.acos(min(1.0, max(-1.0, cosang))))


class SamplingFailure(RuntimeError):
    """Raised when constrained DOA sampling exhausts its attempt budget."""


def _orthonormal_tangent_frame(u: np.ndarray):
    helper = np.zeros(3)
    helper[np.argmin(np.abs(u))] = 1.0
    t1 = np.cross(u, helper)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(u, t1)


def sample_corrupted_doas(truth, xi_deg: float, min_sep_deg: float,
                          rng_seed: int, max_attempts: int = 1000):
    """Sample assumed DOAs at an exact angular distance from the true ones.

    Each returned direction lies on the circle at ``xi_deg`` around its
    ground-truth direction; the set is rejection-sampled until all pairwise
    separations reach ``min_sep_deg``.
    """
    if xi_deg < 0 or xi_deg >= 90:
        raise ValueError("xi_deg must lie in [0, 90)")
    if xi_deg == 0:
        return list(truth)
    rng = np.random.default_rng(rng_seed)
    xi = math.radians(xi_deg)
    units = [d.unit_vector() for d in truth]
    for _ in range(max_attempts):
        candidates = []
        for u in units:
            t1, t2 = _orthonormal_tangent_frame(u)
            alpha = rng.uniform(0.0, TWO_PI)
            v = (math.cos(xi) * u
                 + math.sin(xi) * (math.cos(alpha) * t1 + math.sin(alpha) * t2))
            candidates.append(Direction.from_vector(v))
        ok = all(
            angular_error(candidates[i], candidates[j]) >= min_sep_deg
            for i in range(len(candidates))
            for j in range(i + 1, len(candidates))
        )
        if ok:
            return candidates
    raise SamplingFailure(
        f"could not draw DOAs at {xi_deg} deg error with "
        f"{min_sep_deg} deg separation in {max_attempts} attempts"
    )
