"""Block-diagonal SPD matrices.

``D_Z = sigma2 * V_Z + Sigma_eps`` is block diagonal: observations only
interact through BAUs they share. The blocks are found once from the
sparsity pattern of ``V_Z`` and stored grouped by size, so solves,
log-determinants and traces run as batched dense operations.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class FactorisationError(np.linalg.LinAlgError):
    def __init__(self, name: str, detail: str = ""):
        super().__init__(f"{name} is not symmetric positive definite{': ' + detail if detail else ''}")
        self.matrix_name = name


class BlockPattern:
    """Partition of ``0..m-1`` into the connected components of a sparse pattern.

    ``groups`` is a list of ``(k, idx)`` with ``idx`` of shape ``(n_blocks, k)``.
    """

    def __init__(self, pattern):
        pattern = sp.csr_matrix(pattern)
        m = pattern.shape[0]
        ncomp, labels = connected_components(pattern, directed=False)
        order = np.argsort(labels, kind="stable")
        sizes = np.bincount(labels, minlength=ncomp)
        starts = np.concatenate([[0], np.cumsum(sizes)])
        by_size: dict[int, list] = {}
        for c in range(ncomp):
            by_size.setdefault(int(sizes[c]), []).append(order[starts[c]:starts[c + 1]])
        self.m = m
        self.groups = [(k, np.array(v, dtype=np.int64)) for k, v in sorted(by_size.items())]
        self.diagonal = all(k == 1 for k, _ in self.groups)

    def blocks(self, M) -> list[np.ndarray]:
        """Dense diagonal blocks of ``M``, one ``(n_blocks, k, k)`` array per group."""
        if sp.issparse(M):
            M = sp.csr_matrix(M)
        out = []
        for k, idx in self.groups:
            if k == 1:
                d = M.diagonal() if sp.issparse(M) else np.diag(M)
                out.append(np.asarray(d)[idx[:, 0]].reshape(-1, 1, 1))
                continue
            arr = np.empty((idx.shape[0], k, k))
            for b, ii in enumerate(idx):
                sub = M[ii][:, ii]
                arr[b] = sub.toarray() if sp.issparse(sub) else sub
            out.append(arr)
        return out


class BlockSPD:
    """A block-diagonal SPD matrix on a :class:`BlockPattern`."""

    def __init__(self, pattern: BlockPattern, blocks, name: str = "D_Z"):
        self.pattern = pattern
        self.blocks = blocks
        self.name = name
        self.chol = []
        for A in blocks:
            try:
                L = np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                raise FactorisationError(name) from None
            if not np.all(np.isfinite(L)):
                raise FactorisationError(name, "non-finite factor")
            self.chol.append(L)

    @property
    def m(self) -> int:
        return self.pattern.m

    def logdet(self) -> float:
        return float(sum(2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum() for L in self.chol))

    def diagonal_values(self) -> np.ndarray:
        """Diagonal as an m-vector (meaningful mainly for diagonal patterns)."""
        d = np.empty(self.m)
        for (k, idx), A in zip(self.pattern.groups, self.blocks):
            d[idx] = np.diagonal(A, axis1=1, axis2=2)
        return d

    def solve(self, X):
        """``D^{-1} X`` for a vector or (dense or sparse) matrix ``X``."""
        if self.pattern.diagonal:
            dinv = 1.0 / self.diagonal_values()
            if sp.issparse(X):
                return sp.csr_matrix(sp.diags(dinv) @ X)
            X = np.asarray(X, dtype=float)
            return X * dinv if X.ndim == 1 else X * dinv[:, None]
        if sp.issparse(X):
            X = X.toarray()
        X = np.asarray(X, dtype=float)
        vec = X.ndim == 1
        Xm = X.reshape(self.m, -1)
        out = np.empty_like(Xm)
        for (k, idx), A in zip(self.pattern.groups, self.blocks):
            out[idx] = np.linalg.solve(A, Xm[idx])
        return out.ravel() if vec else out

    def inverse_blocks(self) -> list[np.ndarray]:
        return [np.linalg.inv(A) for A in self.blocks]


def chol_spd(A, name: str):
    """Lower Cholesky factor of a symmetric matrix, with a named failure."""
    A = np.asarray(A, dtype=float)
    try:
        L = np.linalg.cholesky(0.5 * (A + A.T))
    except np.linalg.LinAlgError:
        raise FactorisationError(name) from None
    return L


def chol_inverse(L) -> np.ndarray:
    """``A^{-1}`` from the lower Cholesky factor of ``A``."""
    from scipy.linalg import solve_triangular

    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)
    return Linv.T @ Linv


def logdet_chol(L) -> float:
    return float(2.0 * np.log(np.diag(L)).sum())
