"""BSS-Eval image metrics: SDR, ISR, SIR and SAR per source.

Each estimated image is decomposed into four mutually orthogonal parts via
least-squares projections onto a nested family of subspaces spanned by
delayed (0 .. filter_len-1 taps) reference images:

* s_target  — projection onto same-channel shifts of the matching reference,
* e_spat    — extra energy captured by cross-channel shifts of that reference,
* e_interf  — extra energy captured by shifts of all other references,
* e_artif   — the remainder.

Because the subspaces are nested, the components are orthogonal and their
energies add up to the estimate energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, toeplitz

DB_CAP = 200.0
RIDGE = 1e-10


@dataclass
class EvalResult:
    """Per-source metrics in dB plus their per-file (source-mean) values."""

    sdr: np.ndarray
    isr: np.ndarray
    sir: np.ndarray
    sar: np.ndarray

    def means(self) -> dict:
        return {name: float(np.mean(getattr(self, name)))
                for name in ("sdr", "isr", "sir", "sar")}

    def per_source_rows(self) -> list:
        rows = []
        for j in range(len(self.sdr)):
            rows.append({name: float(getattr(self, name)[j])
                         for name in ("sdr", "isr", "sir", "sar")})
        return rows


def _db_ratio(num: float, den: float) -> float:
    if den <= num * 10.0 ** (-DB_CAP / 10.0) or den == 0.0:
        return DB_CAP
    return min(10.0 * np.log10(num / den), DB_CAP)


def _correlations(refs: np.ndarray, n_fft: int) -> np.ndarray:
    """r[i, j, delta] = sum_t refs[i](t - delta) refs[j](t) (circular, padded)."""
    spectra = np.fft.rfft(refs, n_fft, axis=-1)
    cross = np.conj(spectra[:, None, :]) * spectra[None, :, :]
    return np.fft.irfft(cross, n_fft, axis=-1)


def _gram(refs: np.ndarray, filter_len: int, n_fft: int) -> np.ndarray:
    """Gram matrix of all shifted reference channels.

    refs is (n_basis, n_samples) after flattening (source, channel); the
    result is (n_basis*filter_len, n_basis*filter_len) with Toeplitz blocks
    G[(i,tau),(j,tau')] = r_ij(tau - tau').
    """
    n_basis = refs.shape[0]
    corr = _correlations(refs, n_fft)
    size = n_basis * filter_len
    gram = np.empty((size, size))
    for i in range(n_basis):
        for j in range(n_basis):
            r = corr[i, j]
            col = r[:filter_len]
            row = np.concatenate(([r[0]], r[-1:-filter_len:-1]))
            gram[i * filter_len:(i + 1) * filter_len,
                 j * filter_len:(j + 1) * filter_len] = toeplitz(col, row)
    return gram


def _rhs(refs: np.ndarray, est: np.ndarray, filter_len: int,
         n_fft: int) -> np.ndarray:
    """Inner products of shifted references with one estimate channel."""
    spectra = np.fft.rfft(refs, n_fft, axis=-1)
    fe = np.fft.rfft(est, n_fft)
    corr = np.fft.irfft(np.conj(spectra) * fe, n_fft, axis=-1)
    return corr[:, :filter_len].reshape(-1)


def _ridged_factor(gram: np.ndarray):
    scale = max(float(np.mean(np.diag(gram))), np.finfo(float).tiny)
    return cho_factor(gram + RIDGE * scale * np.eye(gram.shape[0]),
                      lower=True)


def _apply_filters(refs: np.ndarray, coefs: np.ndarray, filter_len: int,
                   out_len: int) -> np.ndarray:
    """Sum of shifted references weighted by the projection coefficients."""
    out = np.zeros(out_len)
    for i in range(refs.shape[0]):
        taps = coefs[i * filter_len:(i + 1) * filter_len]
        out += np.convolve(refs[i], taps)[:out_len]
    return out


def bss_eval_images(refs, ests, filter_len: int = 512) -> EvalResult:
    """Evaluate estimated source images against their references.

    Parameters
    ----------
    refs, ests : sequence of ndarray
        J matching reference / estimated images, each (channels, samples).
    filter_len : int
        Number of allowed distortion-filter taps.
    """
    refs = [np.atleast_2d(np.asarray(r, dtype=float)) for r in refs]
    ests = [np.atleast_2d(np.asarray(e, dtype=float)) for e in ests]
    if len(refs) != len(ests):
        raise ValueError("need one estimate per reference")
    if filter_len < 1:
        raise ValueError("filter_len must be >= 1")
    shapes = {r.shape for r in refs} | {e.shape for e in ests}
    if len(shapes) != 1:
        raise ValueError(f"all signals must share one shape, got {shapes}")
    n_src = len(refs)
    n_chan, n_samp = refs[0].shape
    out_len = n_samp + filter_len - 1
    n_fft = int(2 ** np.ceil(np.log2(out_len)))

    flat = np.concatenate(refs, axis=0)  # (J*L, n)
    gram = _gram(flat, filter_len, n_fft)
    factor_all = _ridged_factor(gram)

    sdr, isr, sir, sar = (np.empty(n_src) for _ in range(4))
    for j in range(n_src):
        own = slice(j * n_chan * filter_len, (j + 1) * n_chan * filter_len)
        factor_own = _ridged_factor(gram[own, own])
        s_t = np.zeros((n_chan, out_len))
        p_own = np.zeros((n_chan, out_len))
        p_all = np.zeros((n_chan, out_len))
        for c in range(n_chan):
            rhs = _rhs(flat, ests[j][c], filter_len, n_fft)
            basis_c = j * n_chan + c
            ch = slice(basis_c * filter_len, (basis_c + 1) * filter_len)
            factor_ch = _ridged_factor(gram[ch, ch])
            s_t[c] = _apply_filters(flat[basis_c:basis_c + 1],
                                    cho_solve(factor_ch, rhs[ch]),
                                    filter_len, out_len)
            p_own[c] = _apply_filters(flat[j * n_chan:(j + 1) * n_chan],
                                      cho_solve(factor_own, rhs[own]),
                                      filter_len, out_len)
            p_all[c] = _apply_filters(flat, cho_solve(factor_all, rhs),
                                      filter_len, out_len)
        est_pad = np.zeros((n_chan, out_len))
        est_pad[:, :n_samp] = ests[j]
        e_spat = p_own - s_t
        e_interf = p_all - p_own
        e_artif = est_pad - p_all
        en_t = float(np.sum(s_t ** 2))
        en_s = float(np.sum(e_spat ** 2))
        en_i = float(np.sum(e_interf ** 2))
        en_a = float(np.sum(e_artif ** 2))
        sdr[j] = _db_ratio(en_t, en_s + en_i + en_a)
        isr[j] = _db_ratio(en_t, en_s)
        sir[j] = _db_ratio(float(np.sum((s_t + e_spat) ** 2)), en_i)
        sar[j] = _db_ratio(float(np.sum((s_t + e_spat + e_interf) ** 2)), en_a)
    return EvalResult(sdr=sdr, isr=isr, sir=sir, sar=sar)


def mean_over_sources(result: EvalResult) -> dict:
    """Arithmetic per-file mean of each metric over sources."""
    return result.means()
