"""Assembly of the spatial random effects (SRE) model.

The collapsed data model is

    Z = T_Z alpha + S_Z eta + C_Z xi + eps,

with ``eta ~ N(0, K)``, ``xi ~ N(0, sigma2 V)`` at the BAU level and
``eps ~ N(0, sigma2_eps V_eps)``. ``variant="case2"`` attributes the BAU-level
term to the process (fine-scale variation); ``"case1"`` attributes it to the
measurement (intra-BAU systematic error). Both share the same algebra, only
the BAU weights ``V`` differ.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .basis import BasisSet, TensorBasisSet, build_S
from .baus import BauSet, Observations, bin_data
from .linalg import BlockPattern, BlockSPD, chol_spd
from .manifold import Manifold

VARIANTS = ("case1", "case2")
K_TYPES = ("unstructured", "block_exponential")


@dataclass
class Params:
    """Model parameters. ``sigma2`` is the free BAU-level variance."""

    alpha: np.ndarray
    K: np.ndarray
    sigma2: float
    vartheta: np.ndarray | None = None

    def copy(self) -> "Params":
        return Params(self.alpha.copy(), self.K.copy(), float(self.sigma2),
                      None if self.vartheta is None else self.vartheta.copy())


@dataclass
class SreModel:
    baus: BauSet
    basis: BasisSet
    S: object
    C_Z: sp.csr_matrix
    Z: np.ndarray
    v_eps: np.ndarray
    sigma2_eps: float
    variant: str = "case2"
    k_type: str = "block_exponential"
    params: Params | None = None
    mu_eta: np.ndarray | None = None
    Sigma_eta: np.ndarray | None = None
    fitted: bool = False
    loglik_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.k_type not in K_TYPES:
            raise ValueError(f"k_type must be one of {K_TYPES}")
        if self.k_type == "block_exponential" and isinstance(self.basis, TensorBasisSet):
            raise ValueError("block-exponential K is only defined for spatial basis sets")
        self.C_Z = sp.csr_matrix(self.C_Z)
        self.Z = np.asarray(self.Z, dtype=float)
        self.v_eps = np.broadcast_to(np.asarray(self.v_eps, float), self.Z.shape).copy()
        if not self.sigma2_eps > 0 or np.any(self.v_eps <= 0):
            raise ValueError("measurement-error variance must be positive")
        self.T = self.baus.covariates
        self.T_Z = np.asarray(self.C_Z @ self.T)
        if np.linalg.matrix_rank(self.T_Z) < self.T_Z.shape[1]:
            raise ValueError("T_Z is rank deficient: covariates are not identifiable "
                             "from the observed footprints")
        self.S_Z = self.C_Z @ self.S
        if sp.issparse(self.S_Z):
            self.S_Z = sp.csr_matrix(self.S_Z)
        v = self.baus.fs if self.variant == "case2" else self.baus.v_delta
        self.V_Z = sp.csr_matrix(self.C_Z @ sp.diags(v) @ self.C_Z.T)
        self.pattern = BlockPattern(self.V_Z)
        self.V_blocks = self.pattern.blocks(self.V_Z)
        eps = self.sigma2_eps * self.v_eps
        self.eps_blocks = [np.einsum("bk,kl->bkl", eps[idx], np.eye(k))
                           for k, idx in self.pattern.groups]

    @property
    def m(self) -> int:
        return self.Z.size

    @property
    def r(self) -> int:
        return self.basis.r

    @property
    def p(self) -> int:
        return self.T.shape[1]

    @property
    def N(self) -> int:
        return self.baus.N

    @property
    def v_fine(self) -> np.ndarray:
        """BAU-level weights of the free fine-scale component."""
        return self.baus.fs if self.variant == "case2" else self.baus.v_delta

    def D_Z(self, sigma2: float) -> BlockSPD:
        """``sigma2 * V_Z + Sigma_eps`` as a block-diagonal factorised matrix."""
        blocks = [E + sigma2 * V for E, V in zip(self.eps_blocks, self.V_blocks)]
        return BlockSPD(self.pattern, blocks, name="D_Z")

    def proportional_to_identity(self):
        """``(gamma1, gamma2)`` if ``V_Z`` and ``Sigma_eps`` are multiples of I."""
        if not self.pattern.diagonal:
            return None
        vz = self.V_Z.diagonal()
        eps = self.sigma2_eps * self.v_eps
        if np.ptp(vz) <= 1e-14 * abs(vz[0]) and np.ptp(eps) <= 1e-14 * abs(eps[0]):
            return float(vz[0]), float(eps[0])
        return None

    def with_params(self, params: Params, fitted: bool = True, **kw) -> "SreModel":
        """Shallow copy carrying new parameters (matrices are shared)."""
        clone = object.__new__(SreModel)
        clone.__dict__.update(self.__dict__)
        clone.params = params
        clone.fitted = fitted
        clone.mu_eta = kw.get("mu_eta")
        clone.Sigma_eta = kw.get("Sigma_eta")
        clone.loglik_trace = list(kw.get("loglik_trace", self.loglik_trace))
        return clone

    def K_of(self, params: Params | None = None) -> np.ndarray:
        params = params or self.params
        if self.k_type == "block_exponential":
            return build_K(params.vartheta, self.basis)
        return params.K

    def marginal_cov(self, params: Params | None = None) -> np.ndarray:
        """Dense ``Var(Z)``; only for small problems and tests."""
        params = params or self.params
        SZ = self.S_Z.toarray() if sp.issparse(self.S_Z) else np.asarray(self.S_Z)
        K = self.K_of(params)
        return (SZ @ K @ SZ.T + params.sigma2 * self.V_Z.toarray()
                + np.diag(self.sigma2_eps * self.v_eps))


def _distance_matrix(manifold: Manifold, X) -> np.ndarray:
    return manifold.pairwise(X, X)


def build_K(vartheta, basis: BasisSet) -> np.ndarray:
    """Block-diagonal exponential covariance over resolutions.

    ``vartheta`` has one row ``(variance, e-folding length)`` per resolution,
    coarsest first.
    """
    vt = np.asarray(vartheta, dtype=float).reshape(-1, 2)
    groups = basis.resolution_groups()
    if vt.shape[0] != len(groups):
        raise ValueError(f"need {len(groups)} (variance, length) pairs, got {vt.shape[0]}")
    if np.any(~(vt > 0)):
        raise ValueError("block-exponential parameters must be positive")
    K = np.zeros((basis.r, basis.r))
    for (v, ell), idx in zip(vt, groups):
        d = _distance_matrix(basis.manifold, basis.centres[idx])
        K[np.ix_(idx, idx)] = v * np.exp(-d / ell)
    return K


def domain_diameter(manifold: Manifold, X) -> float:
    """Distance across the bounding box of ``X`` (spatial coordinates)."""
    X = np.asarray(X, dtype=float)
    sm = manifold.spatial()
    Xs = X[:, : sm.dim]
    if sm.kind == "sphere":
        return float(np.pi * sm.radius) if X.shape[0] > 1 else 1.0
    lo, hi = Xs.min(axis=0), Xs.max(axis=0)
    d = sm.pairwise(lo, hi)[0, 0]
    return float(d) if d > 0 else 1.0


def estimate_meas_error(manifold: Manifold, coords, Z, max_lag: float | None = None,
                        n_bins: int = 15) -> float:
    """Measurement-error variance from the empirical semivariogram intercept.

    The Matheron estimator is binned on ``(0, max_lag]`` and a straight line
    is fitted by least squares weighted by bin counts; its intercept, floored
    at ``1e-8 var(Z)``, is returned.
    """
    X = np.asarray(coords, dtype=float)
    Z = np.asarray(Z, dtype=float).ravel()
    if Z.size < 30:
        raise ValueError("at least 30 observations are needed to estimate measurement error")
    if max_lag is None:
        max_lag = domain_diameter(manifold, X) / 20.0
    euclid = manifold.measure.name == "euclidean" and not manifold.is_st
    if euclid:
        pairs = cKDTree(X).query_pairs(max_lag, output_type="ndarray")
        i, j = pairs[:, 0], pairs[:, 1]
        d = np.linalg.norm(X[i] - X[j], axis=1)
    else:
        Xs = X[:, : manifold.spatial_dim]
        D = manifold.spatial().pairwise(Xs, Xs)
        i, j = np.triu_indices(Z.size, k=1)
        d = D[i, j]
        keep = d <= max_lag
        i, j, d = i[keep], j[keep], d[keep]
    keep = d > 0
    i, j, d = i[keep], j[keep], d[keep]
    g = 0.5 * (Z[i] - Z[j]) ** 2
    b = np.minimum((d / max_lag * n_bins).astype(int), n_bins - 1)
    cnt = np.bincount(b, minlength=n_bins)
    ok = cnt > 0
    if ok.sum() < 2:
        raise ValueError("fewer than two non-empty semivariogram bins; increase max_lag")
    gbar = np.bincount(b, g, n_bins)[ok] / cnt[ok]
    hbar = np.bincount(b, d, n_bins)[ok] / cnt[ok]
    w = np.sqrt(cnt[ok].astype(float))
    A = np.column_stack([np.ones(ok.sum()), hbar])
    coef = np.linalg.lstsq(A * w[:, None], gbar * w, rcond=None)[0]
    floor = 1e-8 * np.var(Z)
    return float(max(coef[0], floor))


def initial_params(model: SreModel) -> Params:
    TZ, Z = model.T_Z, model.Z
    alpha = np.linalg.lstsq(TZ, Z, rcond=None)[0]
    v = float(np.var(Z - TZ @ alpha))
    if v <= 0:
        v = 1.0
    r = model.r
    sigma2 = 0.5 * v
    if model.k_type == "block_exponential":
        n_res = model.basis.n_res
        ell = domain_diameter(model.baus.manifold, model.baus.centroids) / 5.0
        vt = np.tile([0.1 * v, ell], (n_res, 1))
        K = build_K(vt, model.basis)
        return Params(alpha, K, sigma2, vt)
    return Params(alpha, 0.1 * v * np.eye(r), sigma2)


def assemble(baus: BauSet, basis: BasisSet, obs: Observations, variant: str = "case2",
             k_type: str = "block_exponential", meas_error="given",
             average_in_bau: bool = True, S_method: str = "centroid",
             max_lag: float | None = None, S=None) -> SreModel:
    """Bin the data, build all matrices and initialise the parameters.

    ``meas_error`` is ``"given"`` (use the observations' ``std``), a positive
    float (``Sigma_eps = value * I``) or ``"estimate"`` (semivariogram, with
    ``V_eps = I``).
    """
    clash = set(obs.columns) & set(baus.covariate_names)
    if clash:
        raise ValueError(f"covariates {sorted(clash)} must be attached to the BAUs, "
                         "not to the observations")
    C_Z, Z, std = bin_data(baus, obs, average_in_bau)
    if isinstance(meas_error, str) and meas_error == "estimate":
        coords = C_Z @ baus.centroids
        sigma2_eps = estimate_meas_error(baus.manifold, coords, Z, max_lag)
        v_eps = np.ones(Z.size)
    elif isinstance(meas_error, str) and meas_error == "given":
        if std is None:
            raise ValueError("observations carry no std; pass a variance or 'estimate'")
        sigma2_eps, v_eps = 1.0, std**2
    else:
        sigma2_eps, v_eps = float(meas_error), np.ones(Z.size)
    if S is None:
        S = build_S(basis, baus, S_method)
    model = SreModel(baus, basis, S, C_Z, Z, v_eps, sigma2_eps, variant, k_type)
    model.params = initial_params(model)
    chol_spd(model.K_of(), "K")
    return model
