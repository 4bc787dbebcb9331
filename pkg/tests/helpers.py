"""Random small instances and dense reference computations."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from frk.basis import local_basis
from frk.baus import Observations, auto_baus, footprint_from_polygon
from frk.manifold import plane
from frk.model import Params, assemble, build_K


def dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M)


def random_model(rng, N_side=5, r=5, m=15, n_boxes=2, variant="case2",
                 k_type="unstructured", average_in_bau=False, family="bisquare",
                 covariate=False, hetero=True):
    """Model on an ``N_side x N_side`` unit-square grid with random parameters.

    Observations are ``m`` points plus ``n_boxes`` random rectangles, so the
    measurement blocks are generally not diagonal.
    """
    M = plane()
    baus = auto_baus(M, (1 / N_side, 1 / N_side), [(0, 1), (0, 1)],
                     fs_weight=1.0)
    if hetero:
        baus.fs = rng.uniform(0.5, 2.0, baus.N)
    if covariate:
        baus = baus.with_covariates(baus.centroids[:, :1], ["x"])
    scale = 0.6 if family == "bisquare" else 0.3
    basis = local_basis(M, rng.uniform(size=(r, 2)), np.full(r, scale), family)
    fps = [footprint_from_polygon(baus, p) for p in rng.uniform(size=(m, 2))]
    for _ in range(n_boxes):
        lo = rng.uniform(0, 0.6, 2)
        hi = lo + rng.uniform(0.2, 0.4, 2)
        fps.append(footprint_from_polygon(baus, np.column_stack([lo, hi])))
    k = len(fps)
    std = rng.uniform(0.2, 0.6, k) if hetero else np.full(k, 0.4)
    obs = Observations(fps, rng.normal(size=k), std)
    model = assemble(baus, basis, obs, variant=variant, k_type=k_type,
                     average_in_bau=average_in_bau)
    return model


def random_params(rng, model, sigma2=None):
    p = model.p
    r = model.r
    alpha = rng.normal(size=p)
    if model.k_type == "block_exponential":
        vt = np.column_stack([rng.uniform(0.3, 2.0, model.basis.n_res),
                              rng.uniform(0.1, 0.5, model.basis.n_res)])
        K = build_K(vt, model.basis)
    else:
        G = rng.normal(size=(r, r))
        K = G @ G.T / r + 0.2 * np.eye(r)
        vt = None
    s2 = rng.uniform(0.05, 1.0) if sigma2 is None else sigma2
    return Params(alpha, K, s2, vt)


def dense_marginal(model, params):
    """Mean and covariance of ``Z`` built directly from the definitions."""
    S = dense(model.S)
    CZ = dense(model.C_Z)
    K = model.K_of(params)
    V = np.diag(model.v_fine)
    SigY = S @ K @ S.T
    if model.variant == "case2":
        SigY = SigY + params.sigma2 * V
        SigZ = CZ @ SigY @ CZ.T
    else:
        SigZ = CZ @ SigY @ CZ.T + params.sigma2 * CZ @ V @ CZ.T
    SigZ = SigZ + np.diag(model.sigma2_eps * model.v_eps)
    return CZ @ model.T @ params.alpha, SigZ, SigY


def dense_loglik(model, params):
    mZ, SigZ, _ = dense_marginal(model, params)
    e = model.Z - mZ
    sign, ld = np.linalg.slogdet(SigZ)
    assert sign > 0
    return float(-0.5 * model.m * np.log(2 * np.pi) - 0.5 * ld
                 - 0.5 * e @ np.linalg.solve(SigZ, e))


def dense_posterior(model, params, C_P=None):
    """Conditional mean and covariance of ``C_P Y`` given ``Z``."""
    mZ, SigZ, SigY = dense_marginal(model, params)
    CZ = dense(model.C_Z)
    SigYZ = SigY @ CZ.T
    mY = model.T @ params.alpha
    mu = mY + SigYZ @ np.linalg.solve(SigZ, model.Z - mZ)
    cov = SigY - SigYZ @ np.linalg.solve(SigZ, SigYZ.T)
    if C_P is not None:
        CP = dense(C_P)
        return CP @ mu, CP @ cov @ CP.T
    return mu, cov
