"""Basis functions and the BAU-level design matrix ``S``.

A :class:`BasisSet` stores its functions column-wise (centres, scales,
amplitudes, resolutions) so evaluation at many points is vectorised. Tensor
sets hold a spatial and a temporal set; their members are ordered
temporal-major, spatial-minor, i.e. member ``q * r_s + p`` is
``phi_p(s) * psi_q(t)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .manifold import Manifold, manifold_from_config

FAMILIES = ("bisquare", "gaussian", "exponential", "matern32")
COMPACT = {"bisquare"}
SPARSE_TOL = 1e-13
_CHUNK = 20000


def radial(family: str, d, scale, amplitude=1.0):
    """Evaluate a radial basis profile at distance(s) ``d``."""
    d = np.asarray(d, dtype=float)
    u = d / scale
    if family == "bisquare":
        return np.where(u <= 1.0, amplitude * (1.0 - u**2) ** 2, 0.0)
    if family == "gaussian":
        return amplitude * np.exp(-0.5 * u**2)
    if family == "exponential":
        return amplitude * np.exp(-u)
    if family == "matern32":
        v = np.sqrt(3.0) * u
        return amplitude * (1.0 + v) * np.exp(-v)
    raise ValueError(f"unknown basis family {family!r}")


@dataclass(frozen=True)
class BasisFunction:
    family: str
    centre: tuple
    scale: float
    amplitude: float = 1.0
    resolution: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}")
        if not self.scale > 0 or not self.amplitude > 0:
            raise ValueError("basis scale and amplitude must be positive")


def eval_basis(f: BasisFunction, manifold: Manifold, s) -> float:
    d = manifold.pairwise(np.atleast_1d(np.asarray(f.centre, float)),
                          np.atleast_1d(np.asarray(s, float)))[0, 0]
    return float(radial(f.family, d, f.scale, f.amplitude))


class BasisSet:
    """An ordered collection of ``r`` basis functions on one manifold."""

    def __init__(self, manifold: Manifold, families, centres, scales,
                 amplitudes=None, resolutions=None):
        centres = np.asarray(centres, dtype=float)
        if centres.ndim == 1:
            centres = centres.reshape(-1, 1)
        r = centres.shape[0]
        if r < 1:
            raise ValueError("a basis set needs at least one function")
        if isinstance(families, str):
            families = [families] * r
        scales = np.broadcast_to(np.asarray(scales, float), (r,)).copy()
        amplitudes = (np.ones(r) if amplitudes is None
                      else np.broadcast_to(np.asarray(amplitudes, float), (r,)).copy())
        resolutions = (np.zeros(r, dtype=int) if resolutions is None
                       else np.asarray(resolutions, dtype=int).reshape(r))
        if len(families) != r:
            raise ValueError("one family per basis function required")
        for fam in set(families):
            if fam not in FAMILIES:
                raise ValueError(f"unknown basis family {fam!r}")
        if np.any(scales <= 0) or np.any(amplitudes <= 0):
            raise ValueError("basis scales and amplitudes must be positive")
        if manifold.is_st:
            raise ValueError("non-tensor basis sets live on spatial manifolds; "
                             "use tensor_basis for space-time")
        if centres.shape[1] != manifold.dim:
            raise ValueError("centre dimension does not match the manifold")
        self.manifold = manifold
        self.families = list(families)
        self.centres = centres
        self.scales = scales
        self.amplitudes = amplitudes
        self.resolutions = resolutions
        self.tensor = None

    # tensor sets override these through TensorBasisSet
    @property
    def r(self) -> int:
        return self.centres.shape[0]

    def __len__(self):
        return self.r

    @property
    def is_compact(self) -> bool:
        return all(f in COMPACT for f in self.families)

    @property
    def n_res(self) -> int:
        return len(np.unique(self.resolutions))

    def resolution_groups(self) -> list[np.ndarray]:
        """Indices of the functions at each resolution, coarsest first."""
        return [np.flatnonzero(self.resolutions == k) for k in np.unique(self.resolutions)]

    def functions(self) -> list[BasisFunction]:
        return [BasisFunction(self.families[i], tuple(self.centres[i]), float(self.scales[i]),
                              float(self.amplitudes[i]), int(self.resolutions[i]))
                for i in range(self.r)]

    def subset(self, idx) -> "BasisSet":
        idx = np.asarray(idx, dtype=int)
        return BasisSet(self.manifold, [self.families[i] for i in idx], self.centres[idx],
                        self.scales[idx], self.amplitudes[idx], self.resolutions[idx])

    def _eval_dense(self, X) -> np.ndarray:
        D = self.manifold.pairwise(X, self.centres)
        out = np.empty_like(D)
        fams = np.asarray(self.families)
        for fam in np.unique(fams):
            cols = fams == fam
            out[:, cols] = radial(fam, D[:, cols], self.scales[cols], self.amplitudes[cols])
        return out

    def evaluate(self, X, sparse: bool | None = None):
        """Evaluate all functions at the rows of ``X``; returns ``(n, r)``.

        Compactly supported sets are returned as CSR matrices with values below
        ``SPARSE_TOL`` stored as structural zeros.
        """
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.manifold.dim) if self.manifold.dim > 1 else X.reshape(-1, 1)
        sparse = self.is_compact if sparse is None else sparse
        if not sparse:
            return self._eval_dense(X)
        blocks = []
        for start in range(0, X.shape[0], _CHUNK):
            B = self._eval_dense(X[start:start + _CHUNK])
            B[np.abs(B) < SPARSE_TOL] = 0.0
            blocks.append(sp.csr_matrix(B))
        if not blocks:
            return sp.csr_matrix((0, self.r))
        return sp.vstack(blocks, format="csr")

    def to_dict(self) -> dict:
        return {
            "manifold": self.manifold.to_dict(),
            "functions": [
                {"family": f.family, "centre": list(f.centre), "scale": f.scale,
                 "amplitude": f.amplitude, "resolution": f.resolution}
                for f in self.functions()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class TensorBasisSet(BasisSet):
    """Products ``phi_p(s) psi_q(t)`` of a spatial and a temporal set."""

    def __init__(self, spatial: BasisSet, temporal: BasisSet):
        if isinstance(spatial, TensorBasisSet) or isinstance(temporal, TensorBasisSet):
            raise ValueError("tensor components must be plain basis sets")
        if temporal.manifold.kind != "real_line":
            raise ValueError("temporal basis must live on the real line")
        if spatial.manifold.kind not in ("plane", "sphere"):
            raise ValueError("spatial basis must live on the plane or the sphere")
        sm = spatial.manifold
        self.manifold = Manifold("st_" + sm.kind, sm.measure, sm.radius)
        self.tensor = (spatial, temporal)
        self.spatial = spatial
        self.temporal = temporal
        # members inherit the spatial resolution; order is temporal-major
        self.resolutions = np.tile(spatial.resolutions, temporal.r)
        self.families = [f"{a}*{b}" for b in temporal.families for a in spatial.families]

    @property
    def r(self) -> int:
        return self.spatial.r * self.temporal.r

    @property
    def is_compact(self) -> bool:
        return self.spatial.is_compact or self.temporal.is_compact

    def functions(self):
        raise TypeError("tensor members are products; inspect .spatial and .temporal")

    def subset(self, idx):
        raise TypeError("tensor basis sets cannot be pruned member-wise")

    def evaluate(self, X, sparse: bool | None = None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.manifold.dim:
            raise ValueError(f"space-time points need {self.manifold.dim} coordinates")
        sparse = self.is_compact if sparse is None else sparse
        Phi = self.spatial.evaluate(X[:, :-1], sparse=sparse)
        Psi = self.temporal.evaluate(X[:, -1:], sparse=False)
        if not sparse:
            return (Psi[:, :, None] * Phi[:, None, :]).reshape(X.shape[0], self.r)
        blocks = [sp.diags(Psi[:, q]) @ Phi for q in range(self.temporal.r)]
        M = sp.hstack(blocks, format="csr")
        M.eliminate_zeros()
        return M

    def to_dict(self) -> dict:
        return {
            "manifold": self.manifold.to_dict(),
            "functions": [],
            "tensor": {"spatial": self.spatial.to_dict(), "temporal": self.temporal.to_dict()},
        }


def basis_from_dict(d: dict) -> BasisSet:
    if d.get("tensor"):
        return tensor_basis(basis_from_dict(d["tensor"]["spatial"]),
                            basis_from_dict(d["tensor"]["temporal"]))
    manifold = manifold_from_config(d["manifold"])
    fns = d["functions"]
    return BasisSet(manifold, [f["family"] for f in fns], [f["centre"] for f in fns],
                    [f["scale"] for f in fns], [f.get("amplitude", 1.0) for f in fns],
                    [f.get("resolution", 0) for f in fns])


def basis_from_json(text: str) -> BasisSet:
    return basis_from_dict(json.loads(text))


def local_basis(manifold: Manifold, locs, scales, family: str = "bisquare") -> BasisSet:
    """One function per (location, scale) pair, all at resolution 0."""
    locs = np.asarray(locs, dtype=float)
    if locs.ndim == 1:
        locs = locs.reshape(-1, 1) if manifold.dim == 1 else locs.reshape(1, -1)
    scales = np.atleast_1d(np.asarray(scales, dtype=float))
    if locs.shape[0] != scales.size:
        raise ValueError(f"{locs.shape[0]} locations but {scales.size} scales")
    if locs.shape[0] < 1:
        raise ValueError("at least one location is required")
    if np.any(scales <= 0):
        raise ValueError("scales must be positive")
    return BasisSet(manifold, family, locs, scales)


def _grid_centres(lo, hi, k):
    """Cell-centre grid with ``k`` points per axis over the box ``[lo, hi]``."""
    axes = [lo[a] + (np.arange(k[a]) + 0.5) * (hi[a] - lo[a]) / k[a] for a in range(len(lo))]
    mesh = np.meshgrid(*axes, indexing="xy")
    return np.column_stack([m.ravel() for m in mesh])


def auto_basis(manifold: Manifold, extent, nres: int = 3, family: str = "bisquare",
               max_basis: int | None = None, k0: int | None = None,
               regular: bool = True) -> BasisSet:
    """Regular multi-resolution basis over a bounding box.

    ``extent`` is ``[(xmin, xmax), (ymin, ymax)]`` (one pair for the real
    line; lon/lat degrees on the sphere). Resolution 1 has ``k0`` centres per
    axis and each finer resolution triples that count. Apertures are 1.5
    times the centre spacing. With ``max_basis`` the finest resolutions are
    dropped until the total fits.
    """
    if not regular:
        raise NotImplementedError("only regular placement is supported")
    if manifold.is_st:
        raise ValueError("build spatio-temporal sets with tensor_basis")
    if nres < 1:
        raise ValueError("nres must be at least 1")
    ext = np.asarray(extent, dtype=float).reshape(-1, 2)
    if ext.shape[0] != manifold.dim:
        raise ValueError("extent dimension does not match the manifold")
    lo, hi = ext[:, 0], ext[:, 1]
    if np.any(hi <= lo):
        raise ValueError("degenerate extent")
    on_sphere = manifold.kind == "sphere"
    if on_sphere:
        lo = np.array([lo[0], max(lo[1], -90.0)])
        hi = np.array([hi[0], min(hi[1], 90.0)])
        base = np.array([k0 or 5, 3])
    else:
        base = np.full(manifold.dim, k0 or 3)

    counts = [int(np.prod(base * 3**n)) for n in range(nres)]
    if max_basis is not None:
        if max_basis < counts[0]:
            raise ValueError(f"max_basis={max_basis} is below the coarsest "
                             f"resolution's {counts[0]} functions")
        while sum(counts) > max_basis:
            counts.pop()
        nres = len(counts)

    centres, scales, res = [], [], []
    for n in range(nres):
        k = base * 3**n
        spacing = (hi - lo) / k
        if on_sphere:
            # lat-lon spacing as arc length at the equator
            step = np.radians(spacing.max()) * manifold.radius
        else:
            step = spacing.max()
        c = _grid_centres(lo, hi, k)
        centres.append(c)
        scales.append(np.full(c.shape[0], 1.5 * step))
        res.append(np.full(c.shape[0], n + 1))
    return BasisSet(manifold, family, np.vstack(centres), np.concatenate(scales),
                    None, np.concatenate(res))


def tensor_basis(spatial: BasisSet, temporal: BasisSet) -> TensorBasisSet:
    return TensorBasisSet(spatial, temporal)


def build_S(basis: BasisSet, baus, method: str = "centroid", n_samples: int = 100,
            seed: int = 0):
    """The ``N x r`` matrix of basis functions averaged over the BAUs.

    ``centroid`` evaluates at BAU centroids; ``monte_carlo`` averages over
    ``n_samples`` uniform draws per (rectangular) cell.
    """
    if basis.manifold.kind != baus.manifold.kind:
        raise ValueError(f"basis lives on {basis.manifold.kind} but BAUs on "
                         f"{baus.manifold.kind}")
    if method == "centroid":
        return basis.evaluate(baus.centroids)
    if method != "monte_carlo":
        raise ValueError(f"unknown S construction method {method!r}")
    if baus.cellsize is None:
        raise ValueError("Monte-Carlo integration needs rectangular BAUs")
    rng = np.random.default_rng(seed)
    N, d = baus.centroids.shape
    acc = None
    for _ in range(n_samples):
        U = rng.uniform(-0.5, 0.5, size=(N, d)) * baus.cellsize
        B = basis.evaluate(baus.centroids + U)
        acc = B if acc is None else acc + B
    S = acc / n_samples
    if sp.issparse(S):
        S = sp.csr_matrix(S)
        S.eliminate_zeros()
    return S


def prune_basis(basis: BasisSet, S_Z):
    """Drop functions whose column in ``S_Z`` is identically zero.

    Returns ``(reduced basis, retained indices)``.
    """
    if S_Z.shape[1] != basis.r:
        raise ValueError("S_Z column count does not match the basis")
    if sp.issparse(S_Z):
        nnz = np.asarray(abs(S_Z).sum(axis=0)).ravel() > 0
    else:
        nnz = np.any(np.asarray(S_Z) != 0, axis=0)
    keep = np.flatnonzero(nnz)
    if keep.size == 0:
        raise ValueError("every basis function is unobserved; nothing to keep")
    if keep.size == basis.r:
        return basis, keep
    return basis.subset(keep), keep
