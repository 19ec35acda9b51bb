"""NTF parameter container, covariance model assembly and initialization.

The model approximates each per-bin covariance as a sum of source
contributions, each being a PARAFAC variance (shared spectral components)
times a source spatial covariance built from grid kernels:

    V[j,f,t]   = sum_k Q[j,k] W[f,k] H[t,k]
    Xi[j]      = sum_d Z[j,d] kernels[d]
    Rhat[f,t]  = sum_j V[j,f,t] Xi[j]
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .sph import DoaGrid, angular_error


@dataclass
class ModelDims:
    """Problem dimensions; K defaults to 25 components per source."""

    n_sources: int
    n_bins: int
    n_frames: int
    n_directions: int
    n_channels: int
    n_components: int | None = None

    def __post_init__(self):
        if self.n_components is None:
            self.n_components = 25 * self.n_sources


@dataclass
class NtfParams:
    """Non-negative factors of the spatially informed NTF model."""

    q: np.ndarray  # (J, K) source-component weights
    w: np.ndarray  # (F, K) spectral patterns
    h: np.ndarray  # (T, K) time activations
    z: np.ndarray  # (J, D) spatial selector, rows sum to one

    def copy(self) -> "NtfParams":
        return NtfParams(self.q.copy(), self.w.copy(), self.h.copy(),
                         self.z.copy())

    @property
    def n_sources(self) -> int:
        return self.q.shape[0]

    def save(self, path):
        np.savez(path, q=self.q, w=self.w, h=self.h, z=self.z)

    @classmethod
    def load(cls, path) -> "NtfParams":
        data = np.load(path)
        return cls(q=data["q"], w=data["w"], h=data["h"], z=data["z"])


class CollapsedSourceError(RuntimeError):
    """A spatial-selector row summed to zero and cannot be rescaled."""


def init_random(dims: ModelDims, seed: int = 0) -> NtfParams:
    """Uniform(0.1, 1.1) initialization; Z rows rescaled to unit sum."""
    rng = np.random.default_rng(seed)

    def draw(*shape):
        return rng.uniform(0.1, 1.1, size=shape)

    params = NtfParams(
        q=draw(dims.n_sources, dims.n_components),
        w=draw(dims.n_bins, dims.n_components),
        h=draw(dims.n_frames, dims.n_components),
        z=draw(dims.n_sources, dims.n_directions),
    )
    return rescale_z(params)


def init_binary(dims: ModelDims, grid: DoaGrid, doas,
                threshold_deg: float = 22.5, seed: int = 0) -> NtfParams:
    """Random init with Z support restricted to cones around known DOAs.

    Z[j, d] is a random positive value when grid direction d is within
    ``threshold_deg`` of doas[j] and exactly zero otherwise, so multiplicative
    updates keep the off-cone entries at zero.
    """
    if len(doas) != dims.n_sources:
        raise ValueError("need one DOA per source")
    params = init_random(dims, seed)
    mask = np.zeros((dims.n_sources, dims.n_directions), dtype=bool)
    for j, doa in enumerate(doas):
        for d, grid_dir in enumerate(grid.directions):
            mask[j, d] = angular_error(grid_dir, doa) <= threshold_deg
        if not mask[j].any():
            raise ValueError(
                f"source {j}: no grid direction within {threshold_deg} deg; "
                "increase the grid size or the threshold"
            )
    z = np.where(mask, params.z, 0.0)
    return rescale_z(replace(params, z=z))


def source_variance(params: NtfParams) -> np.ndarray:
    """PARAFAC source variances V, shape (J, F, T)."""
    return np.einsum("jk,fk,tk->jft", params.q, params.w, params.h,
                     optimize=True)


def source_scm(params: NtfParams, grid: DoaGrid,
               j: int | None = None) -> np.ndarray:
    """Spatial covariance Xi per source: Z-weighted sum of grid kernels.

    Returns (L, L) for a single source index or (J, L, L) when j is None.
    """
    scm = np.einsum("jd,dlm->jlm", params.z, grid.kernels)
    return scm if j is None else scm[j]


def model_covariance(params: NtfParams, grid: DoaGrid,
                     v_hat: np.ndarray | None = None,
                     per_source: bool = False):
    """Model covariances Rhat (F, T, L, L); per-source (J, F, T, L, L) on demand."""
    if v_hat is None:
        v_hat = source_variance(params)
    scm = source_scm(params, grid)
    if per_source:
        return np.einsum("jft,jlm->jftlm", v_hat, scm, optimize=True)
    return np.einsum("jft,jlm->ftlm", v_hat, scm, optimize=True)


def rescale_z(params: NtfParams) -> NtfParams:
    """Divide each Z row by its sum (unit-sum spatial selector)."""
    sums = params.z.sum(axis=1)
    if np.any(sums <= 0):
        bad = np.nonzero(sums <= 0)[0].tolist()
        raise CollapsedSourceError(f"Z rows {bad} have non-positive sum")
    return replace(params, z=params.z / sums[:, None])
