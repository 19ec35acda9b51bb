"""Source-image reconstruction: multichannel Wiener filtering from estimated
model parameters, plus plane-wave-decomposition beamformer baselines.

The Wiener filter always operates on the uncompressed spectrogram, whatever
cost function the model was trained with; the per-source model covariances
then act as (possibly magnitude-domain) ratio masks. Because the per-source
covariances sum to the total model covariance, the reconstructed images sum
back to the mixture.
"""

from __future__ import annotations

import numpy as np

from .model import NtfParams, model_covariance, source_variance
from .priors import regularized
from .signal import SpectroTensor
from .sph import DoaGrid


def _solve_mixture(rhat: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Per-bin solve Rhat x = a; falls back to a ridged solve if singular."""
    try:
        x = np.linalg.solve(rhat, bins[..., None])[..., 0]
        if np.all(np.isfinite(x)):
            return x
    except np.linalg.LinAlgError:
        pass
    reg = regularized(rhat)
    dead = np.trace(reg, axis1=-2, axis2=-1).real <= 0.0
    if np.any(dead):
        # all-zero model bins carry no energy; give them a dummy identity
        # so the batched solve goes through, then zero the result
        reg = reg + dead[..., None, None] * np.eye(reg.shape[-1])
    x = np.linalg.solve(reg, bins[..., None])[..., 0]
    if np.any(dead):
        x[dead] = 0.0
    return x


def mwf_separate(spec: SpectroTensor, params: NtfParams, grid: DoaGrid,
                 v_hat: np.ndarray | None = None):
    """Multichannel Wiener filter estimates of the J source images.

    Returns a list of SpectroTensor, one per source, with
    s_j = Rhat_j Rhat^-1 a per bin.
    """
    if v_hat is None:
        v_hat = source_variance(params)
    rhat = model_covariance(params, grid, v_hat)
    x = _solve_mixture(rhat, spec.bins)  # (F, T, L) = Rhat^-1 a
    per_source = model_covariance(params, grid, v_hat, per_source=True)
    images = np.einsum("jftlm,ftm->jftl", per_source, x, optimize=True)
    return [SpectroTensor(bins=images[j], rate=spec.rate,
                          fft_size=spec.fft_size, hop=spec.hop,
                          n_samples=spec.n_samples,
                          normalization=spec.normalization)
            for j in range(images.shape[0])]


def pwd_beamform(spec: SpectroTensor, steering: np.ndarray) -> np.ndarray:
    """Plane-wave-decomposition estimates s_j = y_j^T a / |y_j|^2, (J, F, T)."""
    y = np.asarray(steering, dtype=float)
    norms = np.sum(y ** 2, axis=1)
    return np.einsum("jl,ftl->jft", y, spec.bins) / norms[:, None, None]


def pwd_respatialize(mono: np.ndarray, steering: np.ndarray,
                     template: SpectroTensor):
    """Re-spatialize mono estimates with their SH gains: image_j = s_j y_j."""
    y = np.asarray(steering, dtype=float)
    images = np.einsum("jft,jl->jftl", mono, y)
    return [SpectroTensor(bins=images[j], rate=template.rate,
                          fft_size=template.fft_size, hop=template.hop,
                          n_samples=template.n_samples,
                          normalization=template.normalization)
            for j in range(images.shape[0])]


def pwd_separate(spec: SpectroTensor, steering: np.ndarray):
    """Beamform towards each source and re-spatialize (PWD baseline)."""
    return pwd_respatialize(pwd_beamform(spec, steering), steering, spec)


def mwf_from_pwd(spec: SpectroTensor, steering: np.ndarray):
    """Wiener filter whose per-source covariances come from PWD estimates.

    Each source gets |s_j|^2 y_j y_j^T plus an equal share of the PWD
    residual as an isotropic term, which keeps the summed model full rank so
    the images add back up to the mixture exactly.
    """
    y = np.asarray(steering, dtype=float)
    n_src, n_ch = y.shape
    s_hat = pwd_beamform(spec, steering)  # (J, F, T)
    residual = spec.bins - np.einsum("jft,jl->ftl", s_hat, y)
    res_power = np.sum(np.abs(residual) ** 2, axis=-1)  # (F, T)
    floor = 1e-12 * np.sum(np.abs(spec.bins) ** 2, axis=-1)
    iso = (np.maximum(res_power, floor) / (n_src * n_ch))[None, :, :]
    power = np.abs(s_hat) ** 2  # (J, F, T)
    eye = np.eye(n_ch)
    kernels = y[:, :, None] * y[:, None, :]  # (J, L, L)
    per_source = (power[..., None, None] * kernels[:, None, None, :, :]
                  + iso[..., None, None] * eye)
    total = per_source.sum(axis=0)
    x = _solve_mixture(total, spec.bins)
    images = np.einsum("jftlm,ftm->jftl", per_source, x, optimize=True)
    return [SpectroTensor(bins=images[j], rate=spec.rate,
                          fft_size=spec.fft_size, hop=spec.hop,
                          n_samples=spec.n_samples,
                          normalization=spec.normalization)
            for j in range(n_src)]
