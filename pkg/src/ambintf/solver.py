"""Objective evaluation and multiplicative-update optimizers.

Implements the squared-Euclidean and Itakura-Saito cost functions, each with
plain maximum-likelihood updates and with Wishart / Inverse-Wishart
localization priors on the source spatial covariances (MAP). One iteration
is a full sweep of the four factor updates in the order Z, Q, W, H, with the
model covariance refreshed after every factor.

The public update functions follow the closed-form update equations exactly
(multiplicative ratio plus unit-sum rescaling of Z). Inside :func:`run` the
Z rescaling is compensated by scaling the matching rows of Q, which leaves
the model covariance invariant and preserves the per-factor descent property
of the multiplicative updates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (CollapsedSourceError, NtfParams, model_covariance,
                    source_scm, source_variance)
from .priors import COST_EU, COST_IS, INV_WISHART, WISHART, PriorSpec, regularized
from .signal import EU_COMPRESSED, IS_POWER, CovarianceField
from .sph import DoaGrid

DEFAULT_SIGMA_EU = 1.0 / math.sqrt(math.pi)


class NumericalFailure(RuntimeError):
    """Non-finite values appeared during optimization."""


@dataclass
class SolverConfig:
    cost: str = COST_EU
    prior: PriorSpec = field(default_factory=PriorSpec.none)
    iterations: int = 500
    sigma_eu: float = DEFAULT_SIGMA_EU
    map_ml_split: tuple | None = None  # (map_iters, ml_iters)
    track_objective: bool = True

    def __post_init__(self):
        if self.cost not in (COST_EU, COST_IS):
            raise ValueError(f"unknown cost {self.cost!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.sigma_eu <= 0:
            raise ValueError("sigma_eu must be positive")


@dataclass
class Trace:
    """Per-sweep objective history with an optional MAP/ML phase label."""

    iterations: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    guard_hits: int = 0

    def append(self, iteration, objective, phase):
        self.iterations.append(iteration)
        self.objectives.append(objective)
        self.phases.append(phase)

    def extend(self, other: "Trace"):
        offset = len(self.iterations)
        self.iterations.extend(offset + np.asarray(other.iterations, int))
        self.objectives.extend(other.objectives)
        self.phases.extend(other.phases)
        self.guard_hits += other.guard_hits

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "objective", "phase"])
            for it, obj, ph in zip(self.iterations, self.objectives,
                                   self.phases):
                writer.writerow([it, "" if obj is None else repr(float(obj)),
                                 ph])


# ---------------------------------------------------------------------------
# objectives


def eu_nll(emp: CovarianceField, rhat: np.ndarray,
           sigma_eu: float = DEFAULT_SIGMA_EU) -> float:
    """Squared-Euclidean negative log-likelihood, constant terms dropped."""
    if emp.kind != EU_COMPRESSED:
        raise ValueError("EU objective expects a magnitude-compressed field")
    t_model = float(np.sum(np.real(rhat * np.conj(rhat))))
    t_cross = float(np.sum(np.real(rhat * np.conj(emp.mats))))
    return (t_model - 2.0 * t_cross) / (math.pi * sigma_eu ** 2)


def is_nll(emp: CovarianceField, rhat: np.ndarray) -> float:
    """Itakura-Saito negative log-likelihood sum tr(R Rhat^-1) + log|Rhat|."""
    if emp.kind != IS_POWER:
        raise ValueError("IS objective expects an uncompressed power field")
    reg = regularized(rhat)
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("model covariance not positive definite") from exc
    logdet = 2.0 * float(np.sum(np.log(
        np.real(np.diagonal(chol, axis1=-2, axis2=-1)))))
    solved = np.linalg.solve(reg, emp.mats)
    trace = float(np.sum(np.real(np.trace(solved, axis1=-2, axis2=-1))))
    return trace + logdet


def objective(config: SolverConfig, emp: CovarianceField, grid: DoaGrid,
              params: NtfParams) -> float:
    """Tracked objective: NLL for ML, (1/FT)-weighted NLL + log-prior for MAP."""
    rhat = model_covariance(params, grid)
    nll = (eu_nll(emp, rhat, config.sigma_eu) if config.cost == COST_EU
           else is_nll(emp, rhat))
    if config.prior.kind is None:
        return nll
    f, t = emp.mats.shape[:2]
    return nll / (f * t) + config.prior.neg_log_prior(source_scm(params, grid))


# ---------------------------------------------------------------------------
# shared precomputation


def _kernel_quadratic(mats: np.ndarray, steering: np.ndarray) -> np.ndarray:
    """y_d^T M y_d for a batch of matrices: (..., L, L) -> (..., D)."""
    return np.real(np.einsum("...lm,dl,dm->...d", mats, steering, steering,
                             optimize=True))


def _inv_psd(mats: np.ndarray) -> np.ndarray:
    return np.linalg.inv(regularized(mats))


def _mu_ratio(num: np.ndarray, den: np.ndarray):
    """MU ratio with the zero-denominator guard (entry left unchanged)."""
    bad = den <= 0.0
    ratio = num / np.where(bad, 1.0, den)
    ratio[bad] = 1.0
    return ratio, int(np.count_nonzero(bad))


def _emp_kernel_traces(emp: CovarianceField, grid: DoaGrid) -> np.ndarray:
    """tr(R_ft Sigma_d) for all bins and grid directions, shape (F, T, D)."""
    return _kernel_quadratic(emp.mats, grid.steering)


def _is_bin_traces(params: NtfParams, emp: CovarianceField, grid: DoaGrid):
    """Per-bin traces tr(Rhat^-1 R Rhat^-1 Sigma_d) and tr(Rhat^-1 Sigma_d)."""
    rhat = model_covariance(params, grid)
    rinv = _inv_psd(rhat)
    p = rinv @ emp.mats @ rinv
    return _kernel_quadratic(p, grid.steering), _kernel_quadratic(
        rinv, grid.steering)


def _check_kind(emp: CovarianceField, cost: str):
    want = EU_COMPRESSED if cost == COST_EU else IS_POWER
    if emp.kind != want:
        raise ValueError(f"{cost} updates expect covariance kind {want!r}, "
                         f"got {emp.kind!r}")


# ---------------------------------------------------------------------------
# spatial selector (Z) update terms


def _eu_z_data_terms(params, grid, v_hat, td):
    j, d = params.z.shape
    ft = v_hat.shape[1] * v_hat.shape[2]
    v2 = v_hat.reshape(j, ft)
    num = v2 @ td.reshape(ft, d)
    xi_quad = params.z @ grid.kernel_gram
    den = (v2 @ v2.T) @ xi_quad
    return num, den


def _prior_z_terms(params, grid, prior: PriorSpec):
    """Prior contributions to the Z update numerator and denominator."""
    scm = source_scm(params, grid)
    xi_inv = _inv_psd(scm)
    ti = _kernel_quadratic(xi_inv, grid.steering)  # tr(Xi^-1 Sigma_d)
    n_ch = grid.n_channels
    if prior.kind == WISHART:
        phi_inv = _inv_psd(prior.anchors)
        tp = _kernel_quadratic(phi_inv, grid.steering)
        return prior.nu * ti, n_ch * ti + prior.nu * tp
    m = xi_inv @ prior.anchors @ xi_inv
    tm = _kernel_quadratic(m, grid.steering)
    return prior.nu * tm, n_ch * tm + (n_ch + prior.nu) * ti


def _z_num_den(params, emp, grid, v_hat, config: SolverConfig):
    """Numerator/denominator of the Z update for the configured cost/prior."""
    if v_hat is None:
        v_hat = source_variance(params)
    if config.cost == COST_EU:
        td = _emp_kernel_traces(emp, grid)
        num, den = _eu_z_data_terms(params, grid, v_hat, td)
    else:
        tp, tg = _is_bin_traces(params, emp, grid)
        j = params.z.shape[0]
        ft = v_hat.shape[1] * v_hat.shape[2]
        v2 = v_hat.reshape(j, ft)
        num = v2 @ tp.reshape(ft, -1)
        den = v2 @ tg.reshape(ft, -1)
    if config.prior.kind is None:
        return num, den
    f, t = emp.mats.shape[:2]
    p_num, p_den = _prior_z_terms(params, grid, config.prior)
    if config.cost == COST_EU:
        half_var = math.pi * config.sigma_eu ** 2 / 2.0
        return num / (f * t) + half_var * p_num, den / (f * t) + half_var * p_den
    return num / (f * t) + p_num, den / (f * t) + p_den


def _apply_z(params, num, den, compensate: bool):
    ratio, hits = _mu_ratio(num, den)
    z_raw = params.z * ratio
    sums = z_raw.sum(axis=1)
    if np.any(sums <= 0):
        bad = np.nonzero(sums <= 0)[0].tolist()
        raise CollapsedSourceError(f"Z rows {bad} collapsed to zero")
    out = replace(params, z=z_raw / sums[:, None])
    if compensate:
        out = replace(out, q=params.q * sums[:, None])
    return out, hits


def _z_update(params, emp, grid, v_hat, config, compensate=False):
    num, den = _z_num_den(params, emp, grid, v_hat, config)
    return _apply_z(params, num, den, compensate)


def update_z_eu_ml(params, emp, grid, v_hat=None) -> NtfParams:
    """EU maximum-likelihood spatial-selector update plus row rescale."""
    _check_kind(emp, COST_EU)
    cfg = SolverConfig(cost=COST_EU, iterations=1, track_objective=False)
    return _z_update(params, emp, grid, v_hat, cfg)[0]


def update_z_eu_wlp(params, emp, grid, prior: PriorSpec, v_hat=None,
                    sigma_eu: float = DEFAULT_SIGMA_EU) -> NtfParams:
    """EU spatial-selector update under the Wishart localization prior."""
    _check_kind(emp, COST_EU)
    if prior.kind != WISHART:
        raise ValueError("prior must be Wishart")
    cfg = SolverConfig(cost=COST_EU, prior=prior, iterations=1,
                       sigma_eu=sigma_eu, track_objective=False)
    return _z_update(params, emp, grid, v_hat, cfg)[0]


def update_z_eu_iwlp(params, emp, grid, prior: PriorSpec, v_hat=None,
                     sigma_eu: float = DEFAULT_SIGMA_EU) -> NtfParams:
    """EU spatial-selector update under the Inverse-Wishart prior."""
    _check_kind(emp, COST_EU)
    if prior.kind != INV_WISHART:
        raise ValueError("prior must be Inverse-Wishart")
    cfg = SolverConfig(cost=COST_EU, prior=prior, iterations=1,
                       sigma_eu=sigma_eu, track_objective=False)
    return _z_update(params, emp, grid, v_hat, cfg)[0]


def update_z_is_ml(params, emp, grid, v_hat=None) -> NtfParams:
    """IS maximum-likelihood spatial-selector update plus row rescale."""
    _check_kind(emp, COST_IS)
    cfg = SolverConfig(cost=COST_IS, iterations=1, track_objective=False)
    return _z_update(params, emp, grid, v_hat, cfg)[0]


def update_z_is_wlp(params, emp, grid, prior: PriorSpec,
                    v_hat=None) -> NtfParams:
    """IS spatial-selector update under the Wishart localization prior."""
    _check_kind(emp, COST_IS)
    if prior.kind != WISHART:
        raise ValueError("prior must be Wishart")
    cfg = SolverConfig(cost=COST_IS, prior=prior, iterations=1,
                       track_objective=False)
    return _z_update(params, emp, grid, v_hat, cfg)[0]


def update_z_is_iwlp(params, emp, grid, prior: PriorSpec,
                     v_hat=None) -> NtfParams:
    """IS spatial-selector update under the Inverse-Wishart prior."""
    _check_kind(emp, COST_IS)
    if prior.kind != INV_WISHART:
        raise ValueError("prior must be Inverse-Wishart")
    cfg = SolverConfig(cost=COST_IS, prior=prior, iterations=1,
                       track_objective=False)
    return _z_update(params, emp, grid, v_hat, cfg)[0]


# ---------------------------------------------------------------------------
# spectral factor (Q, W, H) updates


def _factor_traces_eu(params, emp, grid, td):
    """tr(Remp Xi_j) and tr(Rhat Xi_j) per (source, bin), shapes (J, F, T)."""
    j, d = params.z.shape
    f, t = emp.mats.shape[:2]
    s_emp = (params.z @ td.reshape(f * t, d).T).reshape(j, f, t)
    gram = params.z @ grid.kernel_gram @ params.z.T  # tr(Xi_j Xi_j')
    v_hat = source_variance(params)
    s_mod = np.einsum("ij,jft->ift", gram, v_hat, optimize=True)
    return s_emp, s_mod


def _factor_traces_is(params, emp, grid):
    """tr(Rhat^-1 R Rhat^-1 Xi_j) and tr(Rhat^-1 Xi_j), shapes (J, F, T)."""
    tp, tg = _is_bin_traces(params, emp, grid)
    j, d = params.z.shape
    f, t = emp.mats.shape[:2]
    s_num = (params.z @ tp.reshape(f * t, d).T).reshape(j, f, t)
    s_den = (params.z @ tg.reshape(f * t, d).T).reshape(j, f, t)
    return s_num, s_den


def _qwh_sweep(params, emp, grid, config, td=None):
    """Update Q, then W, then H, refreshing model traces between factors."""
    hits = 0

    def traces(p):
        if config.cost == COST_EU:
            return _factor_traces_eu(p, emp, grid, td)
        return _factor_traces_is(p, emp, grid)

    s_num, s_den = traces(params)
    q_num = np.einsum("fk,tk,jft->jk", params.w, params.h, s_num,
                      optimize=True)
    q_den = np.einsum("fk,tk,jft->jk", params.w, params.h, s_den,
                      optimize=True)
    ratio, n = _mu_ratio(q_num, q_den)
    hits += n
    params = replace(params, q=params.q * ratio)

    s_num, s_den = traces(params)
    w_num = np.einsum("jk,tk,jft->fk", params.q, params.h, s_num,
                      optimize=True)
    w_den = np.einsum("jk,tk,jft->fk", params.q, params.h, s_den,
                      optimize=True)
    ratio, n = _mu_ratio(w_num, w_den)
    hits += n
    params = replace(params, w=params.w * ratio)

    s_num, s_den = traces(params)
    h_num = np.einsum("jk,fk,jft->tk", params.q, params.w, s_num,
                      optimize=True)
    h_den = np.einsum("jk,fk,jft->tk", params.q, params.w, s_den,
                      optimize=True)
    ratio, n = _mu_ratio(h_num, h_den)
    hits += n
    return replace(params, h=params.h * ratio), hits


def update_qwh_eu(params, emp, grid) -> NtfParams:
    """EU updates of the spectral factors Q, W, H (in that order)."""
    _check_kind(emp, COST_EU)
    cfg = SolverConfig(cost=COST_EU, iterations=1, track_objective=False)
    td = _emp_kernel_traces(emp, grid)
    return _qwh_sweep(params, emp, grid, cfg, td)[0]


def update_qwh_is(params, emp, grid) -> NtfParams:
    """IS updates of the spectral factors Q, W, H (in that order)."""
    _check_kind(emp, COST_IS)
    cfg = SolverConfig(cost=COST_IS, iterations=1, track_objective=False)
    return _qwh_sweep(params, emp, grid, cfg)[0]


# ---------------------------------------------------------------------------
# full runs


def _check_dims(params: NtfParams, emp: CovarianceField, grid: DoaGrid):
    f, t, l1, l2 = emp.mats.shape
    if grid.n_channels != l1:
        raise ValueError(f"grid order implies {grid.n_channels} channels, "
                         f"covariance field has {l1}")
    if params.w.shape[0] != f or params.h.shape[0] != t:
        raise ValueError("parameter shapes do not match the covariance field")
    if params.z.shape[1] != grid.n_directions:
        raise ValueError("Z width does not match the grid size")


def _check_finite(params: NtfParams, iteration: int):
    for name in ("q", "w", "h", "z"):
        arr = getattr(params, name)
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure(
                f"non-finite values in {name.upper()} at sweep {iteration}"
            )


def run(config: SolverConfig, emp: CovarianceField, grid: DoaGrid,
        init: NtfParams, phase: str = "main"):
    """Run ``config.iterations`` full update sweeps from ``init``.

    Returns the final parameters and the per-sweep objective trace.
    """
    _check_kind(emp, config.cost)
    _check_dims(init, emp, grid)
    if config.prior.kind is not None and config.prior.anchors.shape[0] != \
            init.z.shape[0]:
        raise ValueError("prior needs one anchor per source")
    params = init.copy()  # inits guarantee unit-sum Z; zero iterations pass through
    trace = Trace()
    td = _emp_kernel_traces(emp, grid) if config.cost == COST_EU else None
    for it in range(config.iterations):
        v_hat = source_variance(params)
        params, hits = _z_update(params, emp, grid, v_hat, config,
                                 compensate=True)
        trace.guard_hits += hits
        params, hits = _qwh_sweep(params, emp, grid, config, td)
        trace.guard_hits += hits
        _check_finite(params, it)
        if config.track_objective:
            trace.append(it, objective(config, emp, grid, params), phase)
        else:
            trace.append(it, None, phase)
    return params, trace


def run_map_ml(config: SolverConfig, emp: CovarianceField, grid: DoaGrid,
               init: NtfParams):
    """MAP phase followed by ML refinement seeded with the MAP parameters."""
    if config.map_ml_split is None:
        raise ValueError("config.map_ml_split must be set")
    map_iters, ml_iters = config.map_ml_split
    if config.prior.kind is None and map_iters > 0:
        raise ValueError("MAP phase needs a prior")
    map_cfg = replace(config, iterations=map_iters)
    params, trace = run(map_cfg, emp, grid, init, phase="map")
    ml_cfg = replace(config, iterations=ml_iters, prior=PriorSpec.none())
    params, ml_trace = run(ml_cfg, emp, grid, params, phase="ml")
    trace.extend(ml_trace)
    return params, trace
