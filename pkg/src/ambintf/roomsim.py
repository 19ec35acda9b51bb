"""Shoebox image-source simulator emitting SH-domain room impulse responses.

Wall reflections are modeled with a single frequency-independent amplitude
coefficient derived from the requested reverberation time via the Eyring
relation beta^2 = exp(-55.26 * V / (c * S * T60)), which the image-source
energy decay reproduces asymptotically. Each image contributes a windowed-
sinc fractional-delay spike scaled by beta^r / distance and spatialized with
the real-SH steering vector of its direction of arrival.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .signal import MultichannelAudio, N3D
from .sph import Direction, steering_matrix

SINC_TAPS = 81


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple
    rt60: float
    speed_of_sound: float = 343.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ValueError("room dims must be three positive lengths")
        if self.rt60 <= 0:
            raise ValueError("rt60 must be positive")

    @property
    def volume(self) -> float:
        x, y, z = self.dims
        return x * y * z

    @property
    def surface(self) -> float:
        x, y, z = self.dims
        return 2.0 * (x * y + x * z + y * z)

    def wall_gain(self) -> float:
        """Per-reflection amplitude beta from the Eyring relation."""
        exponent = 55.26 * self.volume / (
            self.speed_of_sound * self.surface * self.rt60)
        return math.exp(-0.5 * exponent)


@dataclass
class Scene:
    receiver: np.ndarray
    sources: list

    def __post_init__(self):
        self.receiver = np.asarray(self.receiver, dtype=float)
        self.sources = [np.asarray(s, dtype=float) for s in self.sources]

    def doas(self) -> list:
        """Source directions of arrival as seen from the receiver."""
        return [Direction.from_vector(s - self.receiver)
                for s in self.sources]

    def distances(self) -> np.ndarray:
        return np.array([np.linalg.norm(s - self.receiver)
                         for s in self.sources])


@dataclass
class ShRir:
    """SH-domain impulse response of one source, channels-first (L, n).

    ``early`` optionally holds the direct + low-order part used for
    oracle diffuse-ratio bookkeeping.
    """

    data: np.ndarray
    rate: int
    early: np.ndarray | None = field(default=None, repr=False)


class PlacementFailure(RuntimeError):
    """Random source placement could not satisfy the constraints."""


def place_sources_random(room: RoomSpec, n_sources: int,
                         min_sep_deg: float = 45.0,
                         dist_range=(1.5, 2.0), seed: int = 0,
                         max_attempts: int = 200) -> Scene:
    """Receiver >= 1 m from walls; sources on a surrounding spherical shell.

    Sources keep a pairwise angular separation of ``min_sep_deg`` as seen
    from the receiver and stay strictly inside the room. Deterministic for a
    given seed.
    """
    if n_sources < 1:
        raise ValueError("need at least one source")
    rng = np.random.default_rng(seed)
    dims = np.asarray(room.dims)
    if np.any(dims <= 2.0):
        raise PlacementFailure("room too small for a 1 m wall margin")
    lo, hi = dist_range
    min_cos = math.cos(math.radians(min_sep_deg))
    for _ in range(max_attempts):
        receiver = rng.uniform(1.0, dims - 1.0)
        placed = []
        units = []
        for _ in range(n_sources):
            for _ in range(max_attempts):
                u = rng.normal(size=3)
                u /= np.linalg.norm(u)
                pos = receiver + rng.uniform(lo, hi) * u
                inside = np.all(pos > 1e-6) and np.all(pos < dims - 1e-6)
                separated = all(float(u @ v) < min_cos + 1e-12 for v in units)
                if inside and separated:
                    placed.append(pos)
                    units.append(u)
                    break
            else:
                break
        if len(placed) == n_sources:
            return Scene(receiver=receiver, sources=placed)
    raise PlacementFailure(
        f"could not place {n_sources} sources with {min_sep_deg} deg "
        f"separation in {max_attempts} attempts"
    )


def _axis_images(coord: float, length: float, max_order: int):
    """Per-axis image coordinates and wall-hit counts up to max_order hits."""
    coords = []
    hits = []
    k_max = max_order // 2 + 1
    for k in range(-k_max, k_max + 1):
        c_even = coord + 2.0 * k * length
        h_even = abs(2 * k)
        if h_even <= max_order:
            coords.append(c_even)
            hits.append(h_even)
        c_odd = -coord + 2.0 * k * length
        h_odd = abs(2 * k - 1)
        if h_odd <= max_order:
            coords.append(c_odd)
            hits.append(h_odd)
    return np.array(coords), np.array(hits, dtype=int)


def _fractional_spikes(delays: np.ndarray, gains: np.ndarray,
                       steering: np.ndarray, length: int) -> np.ndarray:
    """Accumulate windowed-sinc spikes into an (L, length) response."""
    half = SINC_TAPS // 2
    base = np.floor(delays).astype(int)
    frac = delays - base
    offsets = np.arange(SINC_TAPS) - half
    t = offsets[None, :] - frac[:, None]  # (M, taps)
    window = 0.5 + 0.5 * np.cos(np.pi * t / (half + 1))
    window[np.abs(t) > half + 1] = 0.0
    kernels = np.sinc(t) * window
    idx = base[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < length)
    flat_idx = np.where(valid, idx, 0).ravel()
    out = np.empty((steering.shape[1], length))
    for ch in range(steering.shape[1]):
        weights = (gains * steering[:, ch])[:, None] * kernels
        weights = np.where(valid, weights, 0.0).ravel()
        out[ch] = np.bincount(flat_idx, weights=weights, minlength=length)
    return out


def image_source_rir(room: RoomSpec, scene: Scene, sh_order: int,
                     max_reflection_order: int, rate: int,
                     early_reflection_split: int | None = None):
    """Image-source SH RIR per source.

    ``max_reflection_order`` = 0 yields the anechoic direct path only. When
    ``early_reflection_split`` is given, each returned response also carries
    the partial response of images with at most that many reflections.
    """
    if max_reflection_order < 0:
        raise ValueError("max_reflection_order must be >= 0")
    beta = room.wall_gain()
    c = room.speed_of_sound
    dims = room.dims
    rirs = []
    for src in scene.sources:
        per_axis = [_axis_images(src[i], dims[i], max_reflection_order)
                    for i in range(3)]
        cx, hx = per_axis[0]
        cy, hy = per_axis[1]
        cz, hz = per_axis[2]
        hit_sum = (hx[:, None, None] + hy[None, :, None]
                   + hz[None, None, :])
        keep = hit_sum <= max_reflection_order
        ix, iy, iz = np.nonzero(keep)
        positions = np.stack([cx[ix], cy[iy], cz[iz]], axis=1)
        hits = hit_sum[keep]
        vecs = positions - scene.receiver[None, :]
        dists = np.linalg.norm(vecs, axis=1)
        dists = np.maximum(dists, 1e-6)
        colat = np.arccos(np.clip(vecs[:, 2] / dists, -1.0, 1.0))
        azim = np.arctan2(vecs[:, 1], vecs[:, 0])
        steer = steering_matrix(sh_order, colat, azim)
        gains = beta ** hits / dists
        delays = dists / c * rate
        length = int(np.ceil(delays.max())) + SINC_TAPS + 1
        data = _fractional_spikes(delays, gains, steer, length)
        early = None
        if early_reflection_split is not None:
            sel = hits <= early_reflection_split
            early = _fractional_spikes(delays[sel], gains[sel], steer[sel],
                                       length)
        rirs.append(ShRir(data=data, rate=rate, early=early))
    return rirs


def render_mixture(rirs, dry):
    """Convolve dry signals with their RIRs; the mixture is their exact sum.

    Returns (mixture, images) as MultichannelAudio with the common rate.
    """
    if len(rirs) != len(dry):
        raise ValueError("need one dry signal per impulse response")
    rates = {r.rate for r in rirs}
    if len(rates) != 1:
        raise ValueError("impulse responses disagree on sample rate")
    rate = rates.pop()
    dry = [np.asarray(d, dtype=float).ravel() for d in dry]
    if len({len(d) for d in dry}) != 1:
        raise ValueError("dry signals must share one length")
    out_len = max(len(d) + r.data.shape[1] - 1 for r, d in zip(rirs, dry))
    images = []
    for rir, sig in zip(rirs, dry):
        img = fftconvolve(rir.data, sig[None, :], axes=1)
        padded = np.zeros((img.shape[0], out_len))
        padded[:, :img.shape[1]] = img
        images.append(MultichannelAudio(padded, rate, N3D))
    mixture = MultichannelAudio(
        np.sum([img.samples for img in images], axis=0), rate, N3D)
    return mixture, images


def oracle_epsilon(rirs, cost: str) -> float:
    """Early-to-diffuse ratio from image-source bookkeeping.

    Uses the energy of the direct + first-order part against the remainder:
    the power ratio for the IS cost and its square root (a magnitude ratio)
    for the EU cost. Requires RIRs built with early_reflection_split=1.
    """
    ratios = []
    for rir in rirs:
        if rir.early is None:
            raise ValueError("RIR lacks the early/late split")
        e_early = float(np.sum(rir.early ** 2))
        e_late = float(np.sum((rir.data - rir.early) ** 2))
        if e_late <= 0.0:
            raise ValueError("no diffuse part; room is anechoic")
        ratios.append(e_early / e_late)
    power_ratio = float(np.mean(ratios))
    return power_ratio if cost == "is" else math.sqrt(power_ratio)
