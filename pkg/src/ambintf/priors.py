"""Localization priors on source spatial covariances.

Both prior families are anchored at Phi_j = y_j y_j^T + eps*I, the rank-1
steering covariance of the known DOA plus an isotropic diffuse term. The
scale matrices are chosen so that the distribution mean equals the anchor:
Psi_W = Phi/nu for the Wishart and Psi_IW = (nu - L)*Phi for the Inverse
Wishart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WISHART = "wishart"
INV_WISHART = "inv_wishart"

COST_EU = "eu"
COST_IS = "is"

# degrees of freedom fitted per reverberation time in the source study,
# first-order (L = 4) only; keys are (cost, prior kind)
NU_TABLE = {
    (COST_EU, WISHART): {0.25: 4.7, 0.5: 6.4, 0.75: 7.3},
    (COST_IS, WISHART): {0.25: 4.0},
    (COST_EU, INV_WISHART): {0.25: 4.7},
    (COST_IS, INV_WISHART): {0.25: 4.5},
}


class DegreesOfFreedomError(ValueError):
    """nu is too small for the requested prior family."""


def default_nu(cost: str, kind: str, rt60: float, n_channels: int = 4) -> float:
    """Default degrees of freedom for a (cost, prior, RT60) combination.

    First-order values come from the fitted table; for larger channel counts
    the tabulated value is scaled by L/4 so the relative concentration nu/L
    stays constant. Missing table cells raise, requiring an explicit nu.
    """
    table = NU_TABLE.get((cost, kind))
    if table is None or rt60 not in table:
        raise KeyError(
            f"no fitted nu for cost={cost!r}, prior={kind!r}, rt60={rt60}; "
            "pass nu explicitly"
        )
    return table[rt60] * n_channels / 4.0


def build_anchor(steering, epsilon: float) -> np.ndarray:
    """Anchor matrix Phi = y y^T + eps*I for one steering vector."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    y = np.asarray(steering, dtype=float)
    return np.outer(y, y) + epsilon * np.eye(y.shape[0])


def wishart_scale(anchor: np.ndarray, nu: float) -> np.ndarray:
    """Wishart scale matrix Psi = Phi/nu (mean nu*Psi equals the anchor)."""
    n_ch = anchor.shape[0]
    if nu <= n_ch - 1:
        raise DegreesOfFreedomError(
            f"Wishart requires nu > L-1 = {n_ch - 1}, got {nu}"
        )
    return anchor / nu


def inv_wishart_scale(anchor: np.ndarray, nu: float) -> np.ndarray:
    """Inverse-Wishart scale Psi = (nu - L)*Phi (mean Psi/(nu-L) = anchor)."""
    n_ch = anchor.shape[0]
    if nu < n_ch + 0.5:
        raise DegreesOfFreedomError(
            f"Inverse-Wishart requires nu >= L+0.5 = {n_ch + 0.5}, got {nu}"
        )
    return (nu - n_ch) * anchor


def regularized(mat: np.ndarray, rel: float = 1e-9) -> np.ndarray:
    """Symmetric ridge of rel*trace/L, the standard guard before inversion."""
    n = mat.shape[-1]
    tr = np.trace(mat, axis1=-2, axis2=-1).real
    ridge = rel * tr / n
    if mat.ndim == 2:
        return mat + ridge * np.eye(n)
    return mat + ridge[..., None, None] * np.eye(n)


def _chol_logdet(mat: np.ndarray) -> float:
    chol = np.linalg.cholesky(mat)
    return 2.0 * float(np.sum(np.log(np.diag(chol).real)))


def neg_log_prior_wishart(scm_hat: np.ndarray, psi_w: np.ndarray,
                          nu: float) -> float:
    """Wishart negative log-prior tr(Psi^-1 Xi) + (L - nu) log|Xi| (+const)."""
    n_ch = scm_hat.shape[0]
    reg = regularized(scm_hat)
    logdet = _chol_logdet(reg)
    tr = float(np.trace(np.linalg.solve(psi_w, scm_hat)).real)
    return tr + (n_ch - nu) * logdet


def neg_log_prior_invwishart(scm_hat: np.ndarray, psi_iw: np.ndarray,
                             nu: float) -> float:
    """Inverse-Wishart negative log-prior tr(Psi Xi^-1) + (L + nu) log|Xi|."""
    n_ch = scm_hat.shape[0]
    reg = regularized(scm_hat)
    logdet = _chol_logdet(reg)
    tr = float(np.trace(np.linalg.solve(reg, psi_iw)).real)
    return tr + (n_ch + nu) * logdet


@dataclass
class PriorSpec:
    """Prior family, hyperparameters and per-source anchors.

    ``anchors`` has shape (J, L, L). ``kind`` is None for plain ML runs.
    """

    kind: str | None
    nu: float = 0.0
    epsilon: float = 0.0
    anchors: np.ndarray | None = None
    _scales: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        if self.kind not in (None, WISHART, INV_WISHART):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind is None:
            return
        if self.anchors is None:
            raise ValueError("anchored prior needs anchor matrices")
        self.anchors = np.asarray(self.anchors, dtype=float)
        scale = wishart_scale if self.kind == WISHART else inv_wishart_scale
        self._scales = np.stack([scale(a, self.nu) for a in self.anchors])

    @classmethod
    def none(cls) -> "PriorSpec":
        return cls(kind=None)

    @classmethod
    def from_steering(cls, kind: str, steering: np.ndarray, nu: float,
                      epsilon: float) -> "PriorSpec":
        """Build anchors from a (J, L) stack of source steering vectors."""
        anchors = np.stack([build_anchor(y, epsilon) for y in steering])
        return cls(kind=kind, nu=nu, epsilon=epsilon, anchors=anchors)

    @property
    def scales(self) -> np.ndarray:
        return self._scales

    def neg_log_prior(self, scms: np.ndarray) -> float:
        """Total negative log-prior over the (J, L, L) model SCMs."""
        if self.kind is None:
            return 0.0
        if self.kind == WISHART:
            return sum(
                neg_log_prior_wishart(scm, psi, self.nu)
                for scm, psi in zip(scms, self._scales)
            )
        return sum(
            neg_log_prior_invwishart(scm, psi, self.nu)
            for scm, psi in zip(scms, self._scales)
        )


def estimate_epsilon_pwd(spec_bins: np.ndarray, steering: np.ndarray,
                         cost: str, eps_max: float = 1000.0) -> float:
    """Diffuse-strength estimate from plane-wave-decomposition residuals.

    Beamforms towards each source, removes the re-spatialized estimates and
    takes the ratio of summed direct magnitudes (EU) or powers (IS) to the
    residual. A vanishing residual clamps to ``eps_max``.
    """
    if cost not in (COST_EU, COST_IS):
        raise ValueError(f"unknown cost {cost!r}")
    y = np.asarray(steering, dtype=float)  # (J, L)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("need at least one steering vector")
    a = np.asarray(spec_bins)  # (F, T, L)
    norms = np.sum(y ** 2, axis=1)
    s_hat = np.einsum("jl,ftl->jft", y, a) / norms[:, None, None]
    residual = a - np.einsum("jft,jl->ftl", s_hat, y)
    if cost == COST_EU:
        num = np.sum(np.abs(s_hat))
        den = np.sum(np.linalg.norm(residual, axis=-1))
    else:
        num = np.sum(np.abs(s_hat) ** 2)
        den = np.sum(np.abs(residual) ** 2)
    if den <= num * 1e-12 or den == 0.0:
        return eps_max
    return min(float(num / den), eps_max)
