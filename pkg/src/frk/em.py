"""Maximum-likelihood estimation of the SRE model by EM.

Each iteration computes the conditional distribution of the basis weights
``eta`` (E-step), then updates ``(alpha, sigma2)`` jointly and ``K`` (or the
block-exponential parameters) in closed or one-dimensional form. The
incomplete-data log-likelihood is evaluated through the Sherman-Morrison-
Woodbury identity and the matrix-determinant lemma, so only ``r x r`` dense
factorisations and block-diagonal ``D_Z`` solves occur.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import brentq, minimize

from .linalg import FactorisationError, chol_inverse, chol_spd, logdet_chol
from .model import Params, SreModel, build_K

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


class EMDivergence(RuntimeError):
    """The log-likelihood decreased; indicates a numerical bug, not bad data."""


@dataclass
class EmState:
    iteration: int = 0
    mu_eta: np.ndarray | None = None
    Sigma_eta: np.ndarray | None = None
    params: Params | None = None
    loglik: list = field(default_factory=list)
    converged: bool = False
    sigma2_warnings: int = 0


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M)


def _posterior(model: SreModel, params: Params, need_K_inv: bool = True):
    """Shared pieces of the E-step and the likelihood."""
    K = model.K_of(params)
    LK = chol_spd(K, "K")
    Kinv = chol_inverse(LK)
    D = model.D_Z(params.sigma2)
    SZ = model.S_Z
    DinvS = D.solve(SZ)
    A = _dense(SZ.T @ DinvS) + Kinv
    A = 0.5 * (A + A.T)
    LA = chol_spd(A, "S_Z' D_Z^-1 S_Z + K^-1")
    e = model.Z - model.T_Z @ params.alpha
    b = np.asarray(DinvS.T @ e).ravel()
    return dict(K=K, LK=LK, D=D, DinvS=DinvS, LA=LA, e=e, b=b)


def e_step(model: SreModel, params: Params | None = None):
    """Conditional mean and covariance of ``eta`` given ``Z``."""
    params = params or model.params
    post = _posterior(model, params)
    Sigma = chol_inverse(post["LA"])
    mu = Sigma @ post["b"]
    return mu, Sigma


def marginal_logdet(model: SreModel, params: Params | None = None) -> float:
    """``ln|Sigma_Z|`` by the determinant lemma (r x r factorisations only)."""
    params = params or model.params
    post = _posterior(model, params)
    return logdet_chol(post["LA"]) + logdet_chol(post["LK"]) + post["D"].logdet()


def marginal_solve(model: SreModel, X, params: Params | None = None) -> np.ndarray:
    """``Sigma_Z^-1 X`` by the Sherman-Morrison-Woodbury identity."""
    params = params or model.params
    post = _posterior(model, params)
    D, DinvS, LA = post["D"], post["DinvS"], post["LA"]
    X = np.asarray(X, dtype=float)
    DinvX = D.solve(X)
    inner = cho_solve((LA, True), np.asarray(DinvS.T @ X))
    return DinvX - np.asarray(DinvS @ inner).reshape(DinvX.shape)


def loglik(model: SreModel, params: Params | None = None) -> float:
    """Gaussian log-likelihood of ``Z`` via SMW and the determinant lemma."""
    params = params or model.params
    post = _posterior(model, params)
    D, LA, LK, e, b = post["D"], post["LA"], post["LK"], post["e"], post["b"]
    logdet = logdet_chol(LA) + logdet_chol(LK) + D.logdet()
    w = cho_solve((LA, True), b)
    quad = float(e @ D.solve(e) - b @ w)
    return -0.5 * model.m * LOG2PI - 0.5 * logdet - 0.5 * quad


def update_alpha(model: SreModel, mu, D) -> np.ndarray:
    """Generalised least squares of ``Z - S_Z mu`` on ``T_Z`` under ``D``."""
    TZ = model.T_Z
    y = model.Z - np.asarray(model.S_Z @ mu).ravel()
    DinvT = D.solve(TZ)
    G = TZ.T @ DinvT
    try:
        cf = cho_factor(G)
    except np.linalg.LinAlgError:
        raise FactorisationError("T_Z' D_Z^-1 T_Z") from None
    return cho_solve(cf, DinvT.T @ y)


def update_K_unstructured(mu, Sigma) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    K = np.asarray(Sigma) + np.outer(mu, mu)
    return 0.5 * (K + K.T)


def k_objective(vartheta, M, basis) -> float:
    """``ln|K(vartheta)^-1| - tr(K(vartheta)^-1 M)``; ``-inf`` if K is singular."""
    try:
        K = build_K(vartheta, basis)
        L = np.linalg.cholesky(K)
    except (ValueError, np.linalg.LinAlgError):
        return -np.inf
    return float(-logdet_chol(L) - np.trace(cho_solve((L, True), M)))


def _psd_factor(M) -> np.ndarray:
    """``F`` with ``F F' = M`` for a symmetric PSD ``M``."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(M)
        return U * np.sqrt(np.clip(w, 0.0, None))


def _profiled_block(D, F, ell):
    """Best variance and objective of one resolution at length ``ell``.

    ``F F'`` is the resolution's block of ``Sigma + mu mu'``, so
    ``tr(R^-1 M) = ||L^-1 F||^2`` with ``L`` the Cholesky factor of ``R``.
    """
    rn = F.shape[0]
    R = np.exp(-D / ell)
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        return np.nan, -np.inf
    G = solve_triangular(L, F, lower=True, check_finite=False)
    c = float(np.einsum("ij,ij->", G, G))
    if not np.isfinite(c) or c <= 0:
        return np.nan, -np.inf
    v = c / rn
    return v, -rn * np.log(v) - logdet_chol(L) - rn


def update_K_model(vartheta_prev, mu, Sigma, basis, max_eval: int = 500) -> np.ndarray:
    """M-step for the block-exponential ``K``.

    The objective separates over resolutions, and within a resolution the
    variance has a closed-form maximiser given the length, so each block is
    a one-dimensional Nelder-Mead search over ``log(length)`` started at the
    previous value. A block keeps its previous parameters unless the search
    improves on them.
    """
    prev = np.asarray(vartheta_prev, dtype=float).reshape(-1, 2)
    M = np.asarray(Sigma) + np.outer(mu, mu)
    groups = basis.resolution_groups()
    if not np.isfinite(k_objective(prev, M, basis)):
        raise FactorisationError("K(vartheta_prev)", "objective is not finite at the start")
    out = prev.copy()
    for n, idx in enumerate(groups):
        Mn = M[np.ix_(idx, idx)]
        v0, ell0 = prev[n]
        if idx.size == 1:
            out[n] = (Mn[0, 0], ell0)
            continue
        D = basis.manifold.pairwise(basis.centres[idx], basis.centres[idx])
        F = _psd_factor(0.5 * (Mn + Mn.T))
        L0 = np.linalg.cholesky(np.exp(-D / ell0))
        G0 = solve_triangular(L0, F, lower=True, check_finite=False)
        f_prev = -idx.size * np.log(v0) - logdet_chol(L0) - np.einsum("ij,ij->", G0, G0) / v0

        def negf(x):
            val = _profiled_block(D, F, np.exp(x[0]))[1]
            return -val if np.isfinite(val) else np.inf

        res = minimize(negf, x0=[np.log(ell0)], method="Nelder-Mead",
                       options={"maxfev": max_eval, "xatol": 1e-6, "fatol": 1e-10})
        cands = [(ell0, *_profiled_block(D, F, ell0))]
        if np.isfinite(res.fun):
            ell = float(np.exp(res.x[0]))
            cands.append((ell, *_profiled_block(D, F, ell)))
        ell, v, f = max(cands, key=lambda c: c[2])
        if np.isfinite(f) and f >= f_prev:
            out[n] = (v, ell)
    return out


# ------------------------------------------------------------ sigma2 update

class _Sigma2Problem:
    """The ``(alpha, sigma2)`` M-step for fixed E-step moments."""

    def __init__(self, model: SreModel, mu, Sigma):
        self.model = model
        SZ = model.S_Z
        self.y = model.Z - np.asarray(SZ @ mu).ravel()
        P = np.asarray(SZ @ Sigma)
        pat = model.pattern
        if pat.diagonal:
            q = (np.asarray(SZ.multiply(P).sum(axis=1)).ravel() if sp.issparse(SZ)
                 else np.einsum("ij,ij->i", SZ, P))
            self.q = q
            self.v = model.V_Z.diagonal()
            self.eps = model.sigma2_eps * model.v_eps
        else:
            SZd = _dense(SZ)
            self.Q = [np.einsum("bkr,blr->bkl", P[idx], SZd[idx]) for _, idx in pat.groups]

    def alpha(self, D):
        TZ = self.model.T_Z
        DinvT = D.solve(TZ)
        return np.linalg.solve(TZ.T @ DinvT, DinvT.T @ self.y)

    def residual(self, sigma2: float):
        """``tr(D^-1 V D^-1 Omega) - tr(D^-1 V)`` and the matching alpha."""
        model = self.model
        D = model.D_Z(sigma2)
        alpha = self.alpha(D)
        u = self.y - model.T_Z @ alpha
        if model.pattern.diagonal:
            d = self.eps + sigma2 * self.v
            g = float(np.sum(self.v * (self.q + u**2) / d**2) - np.sum(self.v / d))
            return g, alpha
        g = 0.0
        for (k, idx), A, V, Q in zip(model.pattern.groups, D.blocks, model.V_blocks, self.Q):
            Ai = np.linalg.inv(A)
            AiV = Ai @ V
            Mb = AiV @ Ai
            ub = u[idx]
            g += (np.einsum("bkl,blk->", Mb, Q) + np.einsum("bk,bkl,bl->", ub, Mb, ub)
                  - np.einsum("bkk->", AiV))
        return float(g), alpha

    def trace_omega(self, alpha) -> float:
        u = self.y - self.model.T_Z @ alpha
        return float(np.sum(self.q + u**2))


def sigma2_residual(model: SreModel, sigma2: float, mu, Sigma) -> float:
    """Residual of the sigma2 stationarity equation (alpha profiled out)."""
    return _Sigma2Problem(model, mu, Sigma).residual(sigma2)[0]


def update_sigma2(model: SreModel, mu, Sigma, upper: float | None = None,
                  closed_form: bool = True):
    """Joint update of the BAU-level variance and ``alpha``.

    Returns ``(sigma2, alpha, warned)``; ``warned`` is set when the root lies
    beyond the bracket and the upper end is returned instead.
    """
    prob = _Sigma2Problem(model, mu, Sigma)
    gam = model.proportional_to_identity() if closed_form else None
    if gam is not None:
        g1, g2 = gam
        alpha = np.linalg.lstsq(model.T_Z, prob.y, rcond=None)[0]
        s2 = (prob.trace_omega(alpha) / model.m - g2) / g1
        return max(s2, 0.0), alpha, False
    if upper is None:
        upper = 10.0 * float(np.var(model.Z))
    g0 = prob.residual(0.0)[0]
    if g0 <= 0:
        return 0.0, prob.alpha(model.D_Z(0.0)), False
    ghi = prob.residual(upper)[0]
    if ghi > 0:
        warnings.warn("sigma2 root lies above the bracket; using the upper end",
                      RuntimeWarning, stacklevel=2)
        return upper, prob.alpha(model.D_Z(upper)), True
    s2 = brentq(lambda s: prob.residual(s)[0], 0.0, upper, xtol=1e-14 * upper,
                rtol=8.9e-16, maxiter=500)
    return s2, prob.alpha(model.D_Z(s2)), False


# ------------------------------------------------------------------- driver

def em_step(model: SreModel, params: Params):
    """One EM iteration from ``params``; returns the new parameters."""
    mu, Sigma = e_step(model, params)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        s2, alpha, warned = update_sigma2(model, mu, Sigma)
    if warned:
        for w in caught:
            log.warning(str(w.message))
    if model.k_type == "unstructured":
        new = Params(alpha, update_K_unstructured(mu, Sigma), s2)
    else:
        vt = update_K_model(params.vartheta, mu, Sigma, model.basis)
        new = Params(alpha, build_K(vt, model.basis), s2, vt)
    return new, warned


def fit(model: SreModel, n_em: int = 100, tol: float = 0.01, print_lik: bool = False):
    """Run EM until the log-likelihood changes by less than ``tol``.

    Returns the fitted model (a copy carrying the estimates and the final
    conditional moments of ``eta``) and the :class:`EmState`.
    """
    params = model.params.copy()
    state = EmState(params=params)
    state.loglik.append(loglik(model, params))
    if print_lik:
        log.info("EM iteration 0: loglik %.6f", state.loglik[-1])
    for it in range(1, n_em + 1):
        new, warned = em_step(model, params)
        ll = loglik(model, new)
        prev = state.loglik[-1]
        state.sigma2_warnings += int(warned)
        if ll < prev - 1e-6 * abs(prev):
            raise EMDivergence(f"log-likelihood decreased at iteration {it}: "
                               f"{prev:.10g} -> {ll:.10g}")
        state.loglik.append(ll)
        state.iteration = it
        params = new
        if print_lik:
            log.info("EM iteration %d: loglik %.6f", it, ll)
        if abs(ll - prev) < tol:
            state.converged = True
            break
    mu, Sigma = e_step(model, params)
    state.params, state.mu_eta, state.Sigma_eta = params, mu, Sigma
    fitted = model.with_params(params, fitted=True, mu_eta=mu, Sigma_eta=Sigma,
                               loglik_trace=state.loglik)
    return fitted, state
