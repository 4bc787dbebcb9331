"""Geometries and distance measures.

A :class:`Manifold` couples a geometry kind with a :class:`Measure`. Measures
are vectorised: ``measure.pairwise(X1, X2)`` returns the full distance matrix
between the rows of ``X1`` and ``X2``. Spatio-temporal manifolds keep the
spatial and temporal distances separate (see :func:`st_distance`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

EARTH_RADIUS_KM = 6371.0

KINDS = ("real_line", "plane", "sphere", "st_plane", "st_sphere")


@dataclass(frozen=True)
class Measure:
    """A distance function together with the coordinate dimension it expects.

    ``fn`` maps two ``(n, dim)`` / ``(k, dim)`` arrays to an ``(n, k)`` array of
    nonnegative distances.
    """

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dim: int
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError("measure dimension must be a positive integer")

    def pairwise(self, X1, X2=None) -> np.ndarray:
        X1 = _as_points(X1, self.dim)
        X2 = X1 if X2 is None else _as_points(X2, self.dim)
        return self.fn(X1, X2)


def _as_points(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if dim > 1 or X.size == 1 else X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(
            f"points have coordinate dimension {X.shape[-1]}, expected {dim}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite coordinates")
    return X


def _euclid(X1, X2):
    return cdist(X1, X2)


def euclidean_measure(dim: int) -> Measure:
    return Measure(_euclid, dim, name="euclidean")


def make_scaled_measure(scale) -> Measure:
    """Euclidean distance after multiplying each coordinate axis by ``scale``.

    A scale of ``(4, 1)`` stretches the first axis fourfold, which is how
    geometric anisotropy is introduced.
    """
    scale = np.atleast_1d(np.asarray(scale, dtype=float))
    if scale.ndim != 1 or scale.size == 0 or not np.all(np.isfinite(scale)):
        raise ValueError("scale must be a non-empty vector of finite reals")
    if np.any(scale <= 0):
        raise ValueError("all scales must be strictly positive")

    def fn(X1, X2):
        return cdist(X1 * scale, X2 * scale)

    return Measure(fn, scale.size, name="scaled", params={"scale": scale.tolist()})


def great_circle_measure(radius: float = EARTH_RADIUS_KM) -> Measure:
    """Great-circle distance between (lon, lat) points in degrees.

    Uses the atan2 (spherical Vincenty) form, which stays accurate both for
    nearby and for nearly antipodal points.
    """
    if not radius > 0:
        raise ValueError("sphere radius must be positive")

    def fn(X1, X2):
        if np.any(np.abs(X1[:, 1]) > 90) or np.any(np.abs(X2[:, 1]) > 90):
            raise ValueError("latitude outside [-90, 90]")
        lat1 = np.radians(X1[:, 1])[:, None]
        lat2 = np.radians(X2[:, 1])[None, :]
        dlon = np.radians(X2[:, 0])[None, :] - np.radians(X1[:, 0])[:, None]
        s1, c1, s2, c2 = np.sin(lat1), np.cos(lat1), np.sin(lat2), np.cos(lat2)
        sd, cd = np.sin(dlon), np.cos(dlon)
        num = np.hypot(c2 * sd, c1 * s2 - s1 * c2 * cd)
        den = s1 * s2 + c1 * c2 * cd
        return radius * np.arctan2(num, den)

    return Measure(fn, 2, name="great_circle", params={"radius": float(radius)})


@dataclass(frozen=True)
class Manifold:
    """Geometry on which BAUs and basis functions live.

    For ``st_*`` kinds ``measure`` is the *spatial* measure and the last
    coordinate of every point is time, measured in ``time_unit``.
    """

    kind: str
    measure: Measure
    radius: float | None = None
    time_unit: str = "days"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown manifold kind {self.kind!r}")
        if self.kind.endswith("sphere") and not (self.radius and self.radius > 0):
            raise ValueError("sphere radius must be positive")

    @property
    def is_st(self) -> bool:
        return self.kind.startswith("st_")

    @property
    def spatial_dim(self) -> int:
        return self.measure.dim

    @property
    def dim(self) -> int:
        return self.measure.dim + (1 if self.is_st else 0)

    def spatial(self) -> "Manifold":
        """The purely spatial counterpart (identity for spatial kinds)."""
        if not self.is_st:
            return self
        return Manifold(self.kind[3:], self.measure, self.radius)

    def pairwise(self, X1, X2=None) -> np.ndarray:
        if self.is_st:
            raise TypeError("spatio-temporal manifolds have no scalar distance; "
                            "use st_distance")
        return self.measure.pairwise(X1, X2)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.radius is not None:
            d["radius"] = self.radius
        if self.measure.name == "scaled":
            d["scale"] = self.measure.params["scale"]
        elif self.measure.name == "custom":
            raise ValueError("custom measures cannot be serialised")
        if self.is_st:
            d["time_unit"] = self.time_unit
        return d


def real_line(measure: Measure | None = None) -> Manifold:
    return Manifold("real_line", measure or euclidean_measure(1))


def plane(measure: Measure | None = None) -> Manifold:
    return Manifold("plane", measure or euclidean_measure(2))


def sphere(radius: float = EARTH_RADIUS_KM) -> Manifold:
    return Manifold("sphere", great_circle_measure(radius), radius=float(radius))


def st_plane(measure: Measure | None = None, time_unit: str = "days") -> Manifold:
    return Manifold("st_plane", measure or euclidean_measure(2), time_unit=time_unit)


def st_sphere(radius: float = EARTH_RADIUS_KM, time_unit: str = "days") -> Manifold:
    return Manifold("st_sphere", great_circle_measure(radius), radius=float(radius),
                    time_unit=time_unit)


def manifold_from_config(cfg) -> Manifold:
    """Build a manifold from ``"plane"`` or ``{"kind": "plane", "scale": [4, 1]}``."""
    if isinstance(cfg, str):
        cfg = {"kind": cfg}
    kind = cfg.get("kind", "plane")
    scale = cfg.get("scale")
    measure = make_scaled_measure(scale) if scale is not None else None
    if kind == "real_line":
        return real_line(measure)
    if kind == "plane":
        return plane(measure)
    if kind in ("sphere", "st_sphere"):
        if scale is not None:
            raise ValueError("scaled measures are not defined on the sphere")
        radius = cfg.get("radius", EARTH_RADIUS_KM)
        if kind == "sphere":
            return sphere(radius)
        return st_sphere(radius, cfg.get("time_unit", "days"))
    if kind == "st_plane":
        return st_plane(measure, cfg.get("time_unit", "days"))
    raise ValueError(f"unknown manifold kind {kind!r}")


def distance(manifold: Manifold, a, b) -> float:
    """Distance between two single points on a spatial manifold."""
    return float(manifold.pairwise(np.atleast_1d(a), np.atleast_1d(b))[0, 0])


def st_distance(manifold: Manifold, a, b) -> tuple[float, float]:
    """``(spatial distance, |t_a - t_b|)`` for points ``(*s, t)``."""
    if not manifold.is_st:
        raise TypeError("st_distance requires a spatio-temporal manifold")
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != manifold.dim or b.size != manifold.dim:
        raise ValueError(f"st points need {manifold.dim} coordinates")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite coordinates")
    ds = manifold.measure.pairwise(a[:-1], b[:-1])[0, 0]
    return float(ds), float(abs(a[-1] - b[-1]))
