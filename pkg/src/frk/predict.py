"""Prediction of the hidden process over BAUs and arbitrary BAU unions.

Predictions over regions are linear maps ``C_P`` of the BAU-level predictor,
so aggregation is exact. In Case 2 the BAU-level fine-scale term ``xi`` is
predicted jointly with ``eta``. Rather than factorising the full
``(r + N)``-dimensional precision, ``xi`` is eliminated by a Schur
complement: its precision ``C_Z' E C_Z + (sigma2 V)^-1`` (``E`` the inverse
measurement covariance) is block diagonal, with blocks joining only BAUs
that share an observation, which makes the region variances sparse products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .baus import BauSet, Footprint, auto_baus, build_incidence, footprint_from_polygon
from .em import e_step
from .linalg import BlockPattern, BlockSPD
from .model import SreModel

VAR_TOL = 1e-12


@dataclass
class PredictionResult:
    mu: np.ndarray
    var: np.ndarray
    C_P: sp.csr_matrix
    cov: np.ndarray | None = None

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.var)

    def __len__(self):
        return self.mu.size


def _clean_var(var, scale):
    tol = VAR_TOL * max(1.0, scale)
    if np.any(var < -tol):
        raise FloatingPointError(f"negative prediction variance {var.min():.3g}")
    return np.maximum(var, 0.0)


def _moments(model: SreModel):
    if model.mu_eta is not None and model.Sigma_eta is not None:
        return model.mu_eta, model.Sigma_eta
    return e_step(model, model.params)


def _check(model: SreModel, C_P):
    if not model.fitted or model.params is None:
        raise ValueError("model has not been fitted")
    if C_P is None:
        return sp.identity(model.N, format="csr")
    C_P = sp.csr_matrix(C_P)
    if C_P.shape[0] == 0:
        raise ValueError("empty prediction region set")
    if C_P.shape[1] != model.N:
        raise ValueError("C_P must have one column per BAU")
    return C_P


def _low_rank_part(model, C_P, full_cov, cap):
    mu, Sigma = _moments(model)
    S_P = C_P @ model.S
    mean = np.asarray(C_P @ (model.T @ model.params.alpha)).ravel() + np.asarray(S_P @ mu).ravel()
    S_Pd = S_P.toarray() if sp.issparse(S_P) else np.asarray(S_P)
    SS = S_Pd @ Sigma
    var = np.einsum("ij,ij->i", SS, S_Pd)
    cov = SS @ S_Pd.T if full_cov and C_P.shape[0] <= cap else None
    return mean, var, cov


def predict_case1(model: SreModel, C_P=None, full_cov: bool = False, cap: int = 2000):
    """Case 1: no process fine-scale term; the BAU-level term is measurement bias."""
    if model.variant != "case1":
        raise ValueError("predict_case1 requires a case1 model")
    C_P = _check(model, C_P)
    mean, var, cov = _low_rank_part(model, C_P, full_cov, cap)
    return PredictionResult(mean, _clean_var(var, np.abs(var).max(initial=0)), C_P, cov)


def _xi_precision(model: SreModel, sigma2: float):
    """Block-diagonal precision of ``xi`` given ``eta`` and ``Z``."""
    E = sp.diags(1.0 / (model.sigma2_eps * model.v_eps))
    CtEC = sp.csr_matrix(model.C_Z.T @ E @ model.C_Z)
    Dxi = CtEC + sp.diags(1.0 / (sigma2 * model.v_fine))
    pattern = BlockPattern(CtEC + sp.identity(model.N))
    return BlockSPD(pattern, pattern.blocks(Dxi), name="xi precision"), E


def _block_inverse_sparse(D: BlockSPD) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for (k, idx), Ainv in zip(D.pattern.groups, D.inverse_blocks()):
        rows.append(np.repeat(idx, k, axis=1).ravel())
        cols.append(np.tile(idx, (1, k)).ravel())
        vals.append(Ainv.ravel())
    n = D.m
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


def predict_case2(model: SreModel, C_P=None, full_cov: bool = False, cap: int = 2000,
                  method: str = "sparse"):
    """Case 2: the BAU-level term is fine-scale process variation."""
    if model.variant != "case2":
        raise ValueError("predict_case2 requires a case2 model")
    C_P = _check(model, C_P)
    sigma2 = model.params.sigma2
    if sigma2 < 0:
        raise ValueError("fine-scale variance must be nonnegative")
    if sigma2 == 0:
        # Lambda is singular in the xi block: xi is identically zero
        mean, var, cov = _low_rank_part(model, C_P, full_cov, cap)
        return PredictionResult(mean, _clean_var(var, np.abs(var).max(initial=0)), C_P, cov)
    if method == "dense":
        return _predict_case2_dense(model, C_P, full_cov, cap)
    if method != "sparse":
        raise ValueError(f"unknown method {method!r}")

    mu, Sigma = _moments(model)
    alpha = model.params.alpha
    Dxi, E = _xi_precision(model, sigma2)
    Dinv = _block_inverse_sparse(Dxi)
    e = model.Z - model.T_Z @ alpha
    # B = S_Z' E C_Z couples eta and xi
    B = sp.csr_matrix(model.C_Z.T @ E @ model.S_Z) if sp.issparse(model.S_Z) \
        else np.asarray(model.C_Z.T @ (E @ model.S_Z))
    rhs = np.asarray(model.C_Z.T @ (E @ e)).ravel() - np.asarray(B @ mu).ravel()
    xi_hat = Dinv @ rhs
    Y_hat = model.T @ alpha + np.asarray(model.S @ mu).ravel() + xi_hat
    mean = np.asarray(C_P @ Y_hat).ravel()

    H = sp.csr_matrix(C_P @ Dinv)
    S_P = C_P @ model.S
    S_Pd = S_P.toarray() if sp.issparse(S_P) else np.asarray(S_P)
    BH = np.asarray((H @ B).toarray() if sp.issparse(B) else H @ B)
    G = S_Pd - BH                       # N_P x r
    GS = G @ Sigma
    var = np.einsum("ij,ij->i", GS, G) + np.asarray(H.multiply(C_P).sum(axis=1)).ravel()
    cov = None
    if full_cov and C_P.shape[0] <= cap:
        cov = GS @ G.T + (H @ C_P.T).toarray()
        cov = 0.5 * (cov + cov.T)
    return PredictionResult(mean, _clean_var(var, np.abs(var).max(initial=0)), C_P, cov)


def _predict_case2_dense(model, C_P, full_cov, cap):
    """Direct dense evaluation through the joint precision of ``(eta, xi)``."""
    N, r = model.N, model.r
    S = model.S.toarray() if sp.issparse(model.S) else np.asarray(model.S)
    Pi = np.hstack([S, np.eye(N)])
    CZ = model.C_Z.toarray()
    Einv = np.diag(1.0 / (model.sigma2_eps * model.v_eps))
    K = model.K_of()
    Lam_inv = np.zeros((r + N, r + N))
    Lam_inv[:r, :r] = np.linalg.inv(K)
    Lam_inv[r:, r:] = np.diag(1.0 / (model.params.sigma2 * model.v_fine))
    CPi = CZ @ Pi
    P_W = CPi.T @ Einv @ CPi + Lam_inv
    Sigma_W = np.linalg.inv(P_W)
    Sigma_W = 0.5 * (Sigma_W + Sigma_W.T)
    W_hat = Sigma_W @ (CPi.T @ Einv @ (model.Z - model.T_Z @ model.params.alpha))
    Y_hat = model.T @ model.params.alpha + Pi @ W_hat
    CP = C_P.toarray()
    A = CP @ Pi
    cov = A @ Sigma_W @ A.T
    var = np.diag(cov).copy()
    return PredictionResult(CP @ Y_hat, _clean_var(var, np.abs(var).max(initial=0)), C_P,
                            cov if full_cov and C_P.shape[0] <= cap else None)


def predict(model: SreModel, newdata=None, full_cov: bool = False, cap: int = 2000):
    """Predict over the BAUs (default) or over prediction regions.

    ``newdata`` may be ``None``, a list of :class:`Footprint`, or an
    incidence matrix ``C_P``.
    """
    if newdata is None:
        C_P = None
    elif isinstance(newdata, (list, tuple)):
        if len(newdata) == 0:
            raise ValueError("empty prediction region set")
        C_P = build_incidence(model.baus, newdata)
    else:
        C_P = newdata
    if model.variant == "case1":
        return predict_case1(model, C_P, full_cov, cap)
    return predict_case2(model, C_P, full_cov, cap)


def region_footprints(baus: BauSet, boxes) -> list[Footprint]:
    """Footprints for a list of boxes ``[(xmin, xmax), (ymin, ymax)]``."""
    return [footprint_from_polygon(baus, box) for box in boxes]


def super_grid(baus: BauSet, cellsize) -> list[Footprint]:
    """Footprints of a coarse regular grid laid over the BAUs' extent.

    Coarse cells that contain no BAU centroid are skipped.
    """
    lo = baus.centroids.min(axis=0) - (baus.cellsize / 2 if baus.cellsize is not None else 0)
    hi = baus.centroids.max(axis=0) + (baus.cellsize / 2 if baus.cellsize is not None else 0)
    coarse = auto_baus(baus.manifold, cellsize, np.column_stack([lo, hi]), n_max=10**7)
    cs = coarse.cellsize
    out = []
    for c in coarse.centroids:
        box = np.column_stack([c - cs / 2, c + cs / 2])
        try:
            out.append(footprint_from_polygon(baus, box))
        except ValueError:
            continue
    return out
