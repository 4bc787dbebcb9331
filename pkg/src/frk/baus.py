"""Basic areal units, observation footprints and incidence matrices.

BAUs are equal-size rectangular cells (or point-BAUs) on a manifold. For
spatio-temporal manifolds the last coordinate is time and the cell size
along it is the time step. An observation or prediction region is attached
to the BAUs whose centroids fall inside it; rectangles are closed on their
lower edges and open on their upper edges so that adjacent regions
partition the centroids.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .manifold import Manifold

N_MAX = 2_000_000
ROW_SUM_TOL = 1e-12


@dataclass
class BauSet:
    manifold: Manifold
    centroids: np.ndarray
    cellsize: np.ndarray | None
    fs: np.ndarray
    covariates: np.ndarray
    covariate_names: list[str] = field(default_factory=lambda: ["intercept"])
    fs_delta: np.ndarray | None = None

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=float)
        if self.centroids.ndim == 1:
            self.centroids = self.centroids.reshape(-1, 1)
        N, d = self.centroids.shape
        if d != self.manifold.dim:
            raise ValueError("centroid dimension does not match the manifold")
        if self.cellsize is not None:
            self.cellsize = np.broadcast_to(np.asarray(self.cellsize, float), (d,)).copy()
            if np.any(self.cellsize <= 0):
                raise ValueError("cell sizes must be positive")
        self.fs = np.broadcast_to(np.asarray(self.fs, float), (N,)).copy()
        if np.any(self.fs <= 0):
            raise ValueError("fine-scale weights must be strictly positive")
        if self.fs_delta is not None:
            self.fs_delta = np.broadcast_to(np.asarray(self.fs_delta, float), (N,)).copy()
            if np.any(self.fs_delta <= 0):
                raise ValueError("fine-scale weights must be strictly positive")
        T = np.asarray(self.covariates, dtype=float)
        if T.ndim == 1:
            T = T.reshape(-1, 1)
        if T.shape[0] != N:
            raise ValueError("covariate rows must match the number of BAUs")
        if len(self.covariate_names) != T.shape[1]:
            raise ValueError("one name per covariate column required")
        if np.linalg.matrix_rank(T) < T.shape[1]:
            raise ValueError("BAU covariate matrix is rank deficient")
        self.covariates = T
        self._lattice = None

    @property
    def N(self) -> int:
        return self.centroids.shape[0]

    @property
    def area(self) -> float:
        return 1.0 if self.cellsize is None else float(np.prod(self.cellsize))

    @property
    def areas(self) -> np.ndarray:
        return np.full(self.N, self.area)

    @property
    def v_delta(self) -> np.ndarray:
        return self.fs if self.fs_delta is None else self.fs_delta

    def with_covariates(self, values, names) -> "BauSet":
        """Append covariate columns (the intercept stays first)."""
        values = np.asarray(values, dtype=float).reshape(self.N, -1)
        return BauSet(self.manifold, self.centroids, self.cellsize, self.fs,
                      np.column_stack([self.covariates, values]),
                      list(self.covariate_names) + list(names), self.fs_delta)

    def _lattice_keys(self, X):
        return np.floor((X - self._origin) / self.cellsize + 0.5).astype(np.int64)

    def lattice(self):
        """Map from integer lattice keys to BAU indices (rectangular cells only)."""
        if self._lattice is None:
            if self.cellsize is None:
                raise ValueError("point BAUs have no lattice")
            self._origin = self.centroids.min(axis=0)
            keys = self._lattice_keys(self.centroids)
            self._lattice = {tuple(k): i for i, k in enumerate(keys)}
            if len(self._lattice) != self.N:
                raise ValueError("BAU centroids are not distinct lattice cells")
        return self._lattice

    def locate(self, points) -> np.ndarray:
        """Index of the cell containing each point, ``-1`` if none does."""
        X = np.asarray(points, dtype=float).reshape(-1, self.manifold.dim)
        if self.cellsize is None:
            dist, idx = cKDTree(self.centroids).query(X)
            return np.where(dist <= 1e-12, idx, -1)
        lat = self.lattice()
        # half-open cells: key = floor((x - (c0 - h/2)) / h)
        keys = np.floor((X - self._origin) / self.cellsize + 0.5).astype(np.int64)
        return np.array([lat.get(tuple(k), -1) for k in keys], dtype=np.int64)

    def grid_shape(self):
        """``(nx, ny)`` when the BAUs fill a complete 2-D lattice, else ``None``."""
        if self.cellsize is None or self.manifold.dim != 2:
            return None
        self.lattice()
        keys = self._lattice_keys(self.centroids)
        ext = keys.max(axis=0) + 1
        if int(np.prod(ext)) != self.N:
            return None
        return int(ext[0]), int(ext[1])


def _intercept_bauset(manifold, centroids, cellsize, fs=1.0) -> BauSet:
    N = len(centroids)
    return BauSet(manifold, centroids, cellsize, np.full(N, float(fs)), np.ones((N, 1)))


def auto_baus(manifold: Manifold, cellsize, extent, fs_weight: float = 1.0,
              n_max: int = N_MAX) -> BauSet:
    """Regular grid of cells covering ``extent``.

    ``extent`` is one ``(lo, hi)`` pair per coordinate (time last for
    space-time). Each axis is widened symmetrically to a whole number of cells.
    """
    ext = np.asarray(extent, dtype=float).reshape(-1, 2)
    d = manifold.dim
    if ext.shape[0] != d:
        raise ValueError("extent dimension does not match the manifold")
    cs = np.broadcast_to(np.asarray(cellsize, float), (d,)).copy()
    if np.any(cs <= 0):
        raise ValueError("cell sizes must be positive")
    lo, hi = ext[:, 0], ext[:, 1]
    if np.any(hi < lo) or np.all(hi == lo):
        raise ValueError("degenerate extent")
    # round before ceil so exact multiples don't gain a cell from float noise
    counts = np.maximum(np.ceil(np.round((hi - lo) / cs, 9)).astype(np.int64), 1)
    total = int(np.prod(counts))
    if total > n_max:
        raise ValueError(f"grid would have {total} BAUs, above the limit of {n_max}")
    pad = (counts * cs - (hi - lo)) / 2
    lo = lo - pad
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * cs[a] for a in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    # x varies fastest so that row-major raster order is natural
    centroids = np.column_stack([m.ravel(order="F") for m in mesh])
    return _intercept_bauset(manifold, centroids, cs, fs_weight)


def baus_from_points(manifold: Manifold, points, fs_weight: float = 1.0) -> BauSet:
    """One square cell per point with side half the smallest neighbour gap."""
    X = np.asarray(points, dtype=float).reshape(-1, manifold.dim)
    if X.shape[0] == 1:
        side = 1.0
    else:
        dist, _ = cKDTree(X).query(X, k=2)
        if np.any(dist[:, 1] == 0):
            raise ValueError("duplicate points cannot each own a BAU")
        side = 0.5 * dist[:, 1].min()
    return _intercept_bauset(manifold, X, np.full(manifold.dim, side), fs_weight)


@dataclass(frozen=True)
class Footprint:
    """Sorted, non-empty set of BAU indices an observation or region covers."""

    indices: tuple

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValueError("a footprint must contain at least one BAU")


def footprint_from_polygon(baus: BauSet, polygon) -> Footprint:
    """Footprint of a point ``(x, y[, t])`` or an axis-aligned box.

    Boxes are given as ``[(xmin, xmax), (ymin, ymax)[, (tmin, tmax)]]``.
    """
    poly = np.asarray(polygon, dtype=float)
    d = baus.manifold.dim
    if poly.ndim == 1 or poly.shape == (1, d):
        idx = baus.locate(poly.reshape(1, d))
        if idx[0] < 0:
            raise ValueError(f"point {poly.ravel().tolist()} lies outside every BAU")
        return Footprint((int(idx[0]),))
    box = poly.reshape(d, 2)
    C = baus.centroids
    inside = np.all((C >= box[:, 0]) & (C < box[:, 1]), axis=1)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise ValueError(f"region {box.tolist()} contains no BAU centroid")
    return Footprint(tuple(int(i) for i in idx))


def build_incidence(baus: BauSet, footprints) -> sp.csr_matrix:
    """Row-normalised area-weighted incidence matrix (one row per footprint)."""
    if len(footprints) == 0:
        raise ValueError("no footprints given")
    areas = baus.areas
    rows, cols, vals = [], [], []
    for j, fp in enumerate(footprints):
        idx = np.asarray(fp.indices, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= baus.N:
            raise ValueError(f"footprint {j} references a BAU outside 0..{baus.N - 1}")
        w = areas[idx]
        rows.append(np.full(idx.size, j))
        cols.append(idx)
        vals.append(w / w.sum())
    C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(footprints), baus.N))
    check_incidence(C)
    return C


def check_incidence(C) -> None:
    rs = np.asarray(C.sum(axis=1)).ravel()
    if np.any(np.abs(rs - 1.0) > ROW_SUM_TOL) or (C.data < 0).any():
        raise ValueError("incidence matrix rows must be nonnegative and sum to one")


@dataclass
class Observations:
    """Raw observations: footprints, values and (optional) measurement std."""

    footprints: list
    values: np.ndarray
    std: np.ndarray | None = None
    columns: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.footprints) != self.values.size:
            raise ValueError("one value per footprint required")
        if self.values.size == 0:
            raise ValueError("no observations")
        if self.std is not None:
            self.std = np.asarray(self.std, dtype=float).ravel()
            if self.std.size != self.values.size or np.any(self.std <= 0):
                raise ValueError("measurement std must be positive, one per observation")


def bin_data(baus: BauSet, obs: Observations, average_in_bau: bool = True):
    """Attach observations to BAUs.

    Returns ``(C_Z, Z, std)`` where ``std`` is ``None`` if the observations
    carried none. With ``average_in_bau`` single-BAU observations sharing a
    BAU are merged into one whose value and std are the respective means;
    multi-BAU footprints are never merged.
    """
    fps, Z, std = list(obs.footprints), obs.values, obs.std
    if average_in_bau:
        groups: dict = {}
        order = []
        for j, fp in enumerate(fps):
            key = fp.indices if len(fp.indices) == 1 else ("multi", j)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(j)
        fps = [obs.footprints[groups[k][0]] for k in order]
        Z = np.array([obs.values[groups[k]].mean() for k in order])
        if std is not None:
            std = np.array([obs.std[groups[k]].mean() for k in order])
    return build_incidence(baus, fps), Z, std


# ---------------------------------------------------------------- CSV ingest

def read_csv(path) -> dict[str, np.ndarray | list]:
    """Columns by header name: float arrays where every entry parses, else strings."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: missing header row")
        rows = list(reader)
        names = [n.strip() for n in reader.fieldnames]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    out = {}
    for raw, name in zip(reader.fieldnames, names):
        col = [r[raw] for r in rows]
        try:
            out[name] = np.array([float(v) for v in col])
        except (TypeError, ValueError):
            out[name] = col
    return out


def require_numeric(tab: dict, names, where="table") -> None:
    for c in names:
        if c in tab and not isinstance(tab[c], np.ndarray):
            raise ValueError(f"{where}: column {c!r} is not numeric")


def _coord_names(manifold: Manifold):
    names = ["x", "y"][: manifold.spatial_dim]
    return names + (["t"] if manifold.is_st else [])


def baus_from_csv(path, manifold: Manifold, cellsize=None) -> BauSet:
    """BAUs from a table with columns ``x,y[,t],fs`` plus covariates."""
    tab = read_csv(path)
    cn = _coord_names(manifold)
    for c in cn + ["fs"]:
        if c not in tab:
            raise ValueError(f"{path}: missing column {c!r}")
    require_numeric(tab, list(tab), str(path))
    X = np.column_stack([tab[c] for c in cn])
    if cellsize is None:
        cellsize = []
        for a in range(X.shape[1]):
            gaps = np.diff(np.unique(X[:, a]))
            cellsize.append(gaps.min() if gaps.size else 1.0)
    extra = [c for c in tab if c not in cn and c != "fs"]
    b = BauSet(manifold, X, cellsize, tab["fs"], np.ones((X.shape[0], 1)))
    if extra:
        b = b.with_covariates(np.column_stack([tab[c] for c in extra]), extra)
    return b


def observations_from_table(tab: dict, baus: BauSet, response: str = "z",
                            std_column: str | None = "std") -> Observations:
    """Observations from a parsed CSV table (points or rectangles)."""
    if response not in tab:
        raise ValueError(f"response column {response!r} not found")
    require_numeric(tab, [response, std_column, "xmin", "xmax", "ymin", "ymax", "t",
                          *_coord_names(baus.manifold)])
    n = tab[response].size
    m = baus.manifold
    rect = all(k in tab for k in ("xmin", "xmax", "ymin", "ymax"))
    fps = []
    if not rect:
        for c in _coord_names(m):
            if c not in tab:
                raise ValueError(f"coordinate column {c!r} not found")
    for j in range(n):
        if rect:
            box = [(tab["xmin"][j], tab["xmax"][j]), (tab["ymin"][j], tab["ymax"][j])]
            if m.is_st:
                t = tab["t"][j]
                half = baus.cellsize[-1] / 2
                box.append((t - half, t + half))
        else:
            box = np.array([tab[c][j] for c in _coord_names(m)])
        try:
            fps.append(footprint_from_polygon(baus, box))
        except ValueError as exc:
            # header is line 1
            raise ValueError(f"line {j + 2}: {exc}") from None
    std = tab[std_column] if std_column and std_column in tab else None
    reserved = set(_coord_names(m)) | {"xmin", "xmax", "ymin", "ymax", response}
    if std_column:
        reserved.add(std_column)
    cols = tuple(c for c in tab if c not in reserved and isinstance(tab[c], np.ndarray))
    return Observations(fps, tab[response], std, cols)
