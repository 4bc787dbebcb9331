"""Simulation benchmark: Gaussian-field simulation, sampling designs, the
simple-kriging gold standard and the prediction scores.

All simulations live on an ``n x n`` grid of cells over the unit square whose
centroids coincide with the BAUs produced by :func:`grid_baus`. Observation
and prediction locations are drawn once per ``(m, seed)``; each replication
``l`` draws a new field and new noise from seed ``seed + l``.
"""
from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.spatial.distance import cdist
from scipy.special import ndtr

from .baus import BauSet, Footprint, Observations, auto_baus
from .manifold import plane

I90_C = 1.64
MAX_GRID_CELLS = 40_000
MAX_KRIGE_M = 4000
CLASSES = ("LH_obs", "LH_unobs", "RH_obs", "RH_unobs")


# --------------------------------------------------------------- covariances

@dataclass(frozen=True)
class Exponential:
    variance: float = 1.0
    tau: float = 0.15

    def __call__(self, X1, X2):
        return self.variance * np.exp(-cdist(X1, X2) / self.tau)

    def diag(self, X):
        return np.full(len(X), self.variance)


@dataclass(frozen=True)
class SquaredExponential:
    """``variance * exp(-|h|^2 / tau)``."""

    variance: float = 1.0
    tau: float = 0.15

    def __call__(self, X1, X2):
        return self.variance * np.exp(-cdist(X1, X2, "sqeuclidean") / self.tau)

    def diag(self, X):
        return np.full(len(X), self.variance)


def _ns_weights(X):
    s1, s2 = X[:, 0], X[:, 1]
    return (0.5 * np.sin(2 * np.pi * s1) * np.cos(2 * np.pi * s2),
            0.5 * np.sin(2 * np.pi * s1))


@dataclass(frozen=True)
class NonstationaryMix:
    """Covariance of ``(Y1 a(s) + Y2 b(s)) / 2`` with exponential ``Y1`` and
    squared-exponential ``Y2``, ``a = sin(2 pi s1) cos(2 pi s2)``,
    ``b = sin(2 pi s1)``."""

    sd1: float = 0.5
    tau1: float = 0.15
    sd2: float = 0.5
    tau2: float = 0.15

    @property
    def parts(self):
        return Exponential(self.sd1**2, self.tau1), SquaredExponential(self.sd2**2, self.tau2)

    def __call__(self, X1, X2):
        a1, b1 = _ns_weights(X1)
        a2, b2 = _ns_weights(X2)
        c1, c2 = self.parts
        return np.outer(a1, a2) * c1(X1, X2) + np.outer(b1, b2) * c2(X1, X2)

    def diag(self, X):
        a, b = _ns_weights(X)
        return a**2 * self.sd1**2 + b**2 * self.sd2**2


# ------------------------------------------------------------------- config

@dataclass
class SimulationConfig:
    n: int = 100
    covariance: str = "exponential"
    variance: float = 1.0
    tau: float = 0.15
    ns_params: tuple = (0.5, 0.15, 0.5, 0.15)
    m: int = 1000
    snr: float = 1.0
    split: tuple = (0.95, 0.05)
    L: int = 20
    seed: int = 0
    n_pred: int = 1000

    def __post_init__(self):
        if self.snr <= 0:
            raise ValueError("SNR must be positive")
        if abs(sum(self.split) - 1.0) > 1e-12 or min(self.split) < 0:
            raise ValueError("LH/RH split fractions must be nonnegative and sum to 1")
        if self.covariance not in ("exponential", "squared_exponential", "nonstationary"):
            raise ValueError(f"unknown covariance {self.covariance!r}")
        self.ns_params = tuple(self.ns_params)
        self.split = tuple(self.split)

    def cov(self):
        if self.covariance == "exponential":
            return Exponential(self.variance, self.tau)
        if self.covariance == "squared_exponential":
            return SquaredExponential(self.variance, self.tau)
        return NonstationaryMix(*self.ns_params)

    def signal_variance(self) -> float:
        """Marginal process variance (grid average for the nonstationary field)."""
        cov = self.cov()
        if isinstance(cov, NonstationaryMix):
            return float(cov.diag(grid_coords(self.n)).mean())
        return float(cov.variance)

    @property
    def noise_var(self) -> float:
        return self.signal_variance() / self.snr

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(**d)


def grid_baus(n: int) -> BauSet:
    return auto_baus(plane(), (1.0 / n, 1.0 / n), [(0.0, 1.0), (0.0, 1.0)])


@functools.lru_cache(maxsize=4)
def grid_coords(n: int) -> np.ndarray:
    c = grid_baus(n).centroids
    c.setflags(write=False)
    return c


# --------------------------------------------------------------- simulation

def _check_grid(n):
    if n * n > MAX_GRID_CELLS:
        raise ValueError(f"exact simulation on a {n}x{n} grid exceeds {MAX_GRID_CELLS} cells; "
                         "use a coarser grid")


@functools.lru_cache(maxsize=2)
def _dense_factor(n: int, cov) -> np.ndarray:
    X = grid_coords(n)
    C = cov(X, X)
    L = cholesky(C, lower=True, overwrite_a=True, check_finite=False)
    return L


@functools.lru_cache(maxsize=4)
def _axis_sqrt(n: int, variance: float, tau: float) -> np.ndarray:
    """Symmetric square-root factor of the 1-D squared-exponential correlation."""
    g = (np.arange(n) + 0.5) / n
    R = np.exp(-((g[:, None] - g[None, :]) ** 2) / tau)
    w, U = np.linalg.eigh(R)
    return U * np.sqrt(np.clip(w, 0.0, None)) * math.sqrt(math.sqrt(variance))


def sample_field(n: int, cov, rng) -> np.ndarray:
    """One exact draw of a zero-mean field on the ``n x n`` grid."""
    _check_grid(n)
    if isinstance(cov, Exponential):
        return _dense_factor(n, cov) @ rng.standard_normal(n * n)
    if isinstance(cov, SquaredExponential):
        # separable on the grid: Cov = Ry (x) Rx with x varying fastest
        R = _axis_sqrt(n, cov.variance, cov.tau)
        W = rng.standard_normal((n, n))
        return (R @ W @ R.T).ravel()
    if isinstance(cov, NonstationaryMix):
        c1, c2 = cov.parts
        y1 = sample_field(n, c1, rng)
        y2 = sample_field(n, c2, rng)
        a, b = _ns_weights(grid_coords(n))
        return a * y1 + b * y2
    raise TypeError(f"cannot simulate covariance {cov!r}")


@dataclass
class Design:
    """Fixed observation and prediction locations (grid-cell indices)."""

    obs: np.ndarray
    pred: dict


def make_design(config: SimulationConfig) -> Design:
    n, m = config.n, config.m
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    X = grid_coords(n)
    left = np.flatnonzero(X[:, 0] < 0.5)
    right = np.flatnonzero(X[:, 0] >= 0.5)
    m_left = int(round(config.split[0] * m))
    m_right = m - m_left
    if m_left > left.size or m_right > right.size:
        raise ValueError("more observations requested than cells available")
    obs_l = np.sort(rng.choice(left, m_left, replace=False))
    obs_r = np.sort(rng.choice(right, m_right, replace=False))
    pred = {}
    for side, cells, obs in (("LH", left, obs_l), ("RH", right, obs_r)):
        k = min(config.n_pred, obs.size)
        pred[f"{side}_obs"] = np.sort(rng.choice(obs, k, replace=False))
        unobs = np.setdiff1d(cells, obs)
        k = min(config.n_pred, unobs.size)
        pred[f"{side}_unobs"] = np.sort(rng.choice(unobs, k, replace=False))
    return Design(np.concatenate([obs_l, obs_r]), pred)


@dataclass
class Replication:
    config: SimulationConfig
    design: Design
    l: int
    Y: np.ndarray
    Z: np.ndarray
    noise_var: float
    Z_new: np.ndarray = field(repr=False, default=None)

    @property
    def X(self):
        return grid_coords(self.config.n)

    @property
    def obs_coords(self):
        return self.X[self.design.obs]


def _replication_rng(config: SimulationConfig, l: int):
    return np.random.default_rng(np.random.SeedSequence(config.seed + l, spawn_key=(1,)))


def simulate(config: SimulationConfig, l: int = 0, design: Design | None = None) -> Replication:
    """Replication ``l``: field, noisy data at the design, and fresh noisy
    copies of every cell for predicted-data scoring."""
    design = design or make_design(config)
    rng = _replication_rng(config, l)
    Y = sample_field(config.n, config.cov(), rng)
    nv = config.noise_var
    Z = Y[design.obs] + math.sqrt(nv) * rng.standard_normal(design.obs.size)
    Z_new = Y + math.sqrt(nv) * rng.standard_normal(Y.size)
    return Replication(config, design, l, Y, Z, nv, Z_new)


def simulate_gp(config: SimulationConfig, l: int = 0, design: Design | None = None):
    if config.covariance == "nonstationary":
        raise ValueError("use simulate_ns for the nonstationary field")
    return simulate(config, l, design)


def simulate_ns(config: SimulationConfig, l: int = 0, design: Design | None = None):
    if config.covariance != "nonstationary":
        raise ValueError("simulate_ns needs covariance='nonstationary'")
    return simulate(config, l, design)


# ------------------------------------------------------------------ kriging

def exact_krige(cov, X_obs, Z, X_pred, noise_var: float):
    """Simple kriging with known zero mean and known covariance."""
    X_obs = np.asarray(X_obs, float)
    X_pred = np.asarray(X_pred, float)
    if X_obs.shape[0] > MAX_KRIGE_M:
        raise ValueError(f"exact kriging is limited to {MAX_KRIGE_M} observations")
    C = cov(X_obs, X_obs)
    C[np.diag_indices_from(C)] += noise_var
    cf = cho_factor(C, lower=True)
    k = cov(X_pred, X_obs)
    mean = k @ cho_solve(cf, np.asarray(Z, float))
    var = cov.diag(X_pred) - np.einsum("ij,ji->i", k, cho_solve(cf, k.T))
    return mean, np.maximum(var, 0.0)


# ------------------------------------------------------------------ scoring

def rmspe(truth, pred) -> float:
    truth, pred = np.asarray(truth, float), np.asarray(pred, float)
    if truth.shape != pred.shape:
        raise ValueError("truth and predictions differ in length")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def coverage(truth, pred, sd, c: float = I90_C) -> float:
    truth, pred, sd = (np.asarray(a, float) for a in (truth, pred, sd))
    if not truth.shape == pred.shape == sd.shape:
        raise ValueError("truth, predictions and sds differ in length")
    return float(np.mean(np.abs(truth - pred) <= c * sd))


def crps_gaussian(truth, pred, sd) -> np.ndarray:
    """Closed-form CRPS of Gaussian predictive distributions."""
    truth, pred, sd = (np.asarray(a, float) for a in (truth, pred, sd))
    out = np.abs(truth - pred)
    pos = sd > 0
    z = (truth[pos] - pred[pos]) / sd[pos]
    pdf = np.exp(-0.5 * z**2) / math.sqrt(2 * math.pi)
    out[pos] = sd[pos] * (z * (2 * ndtr(z) - 1) + 2 * pdf - 1 / math.sqrt(math.pi))
    return out


@dataclass
class Score:
    rmspe: float
    i90: float
    crps: float
    i90_data: float | None = None
    n: int = 0


def score(truth, pred, sd, data=None, noise_var: float | None = None) -> Score:
    """Scores of one predictor on one location set.

    With ``data`` (fresh noisy observations at the same locations) and
    ``noise_var``, also the coverage of intervals widened by the noise.
    """
    s = Score(rmspe(truth, pred), coverage(truth, pred, sd),
              float(np.mean(crps_gaussian(truth, pred, sd))), n=len(np.atleast_1d(truth)))
    if data is not None:
        if noise_var is None:
            raise ValueError("noise_var is required to score predicted data")
        s.i90_data = coverage(data, pred, np.sqrt(np.asarray(sd) ** 2 + noise_var))
    return s


# -------------------------------------------------------------- predictors

Predictor = Callable[[Replication, np.ndarray], tuple]


def exact_predictor(rep: Replication, cells: np.ndarray):
    cov = rep.config.cov()
    mean, var = exact_krige(cov, rep.obs_coords, rep.Z, rep.X[cells], rep.noise_var)
    return mean, np.sqrt(var)


def frk_predictor(nres: int = 2, k_type: str = "block_exponential", variant: str = "case2",
                  meas_error: str = "known", n_em: int = 400, tol: float = 0.01,
                  family: str = "bisquare"):
    """FRK on the grid BAUs with a regular multi-resolution basis."""
    from .basis import auto_basis
    from .em import fit
    from .model import assemble
    from .predict import predict

    def run(rep: Replication, cells: np.ndarray):
        n = rep.config.n
        baus = grid_baus(n)
        basis = auto_basis(baus.manifold, [(0, 1), (0, 1)], nres=nres, family=family)
        obs = Observations([Footprint((int(i),)) for i in rep.design.obs], rep.Z)
        me = rep.noise_var if meas_error == "known" else "estimate"
        model = assemble(baus, basis, obs, variant=variant, k_type=k_type, meas_error=me,
                         S=_grid_S(n, nres, family))
        fitted, state = fit(model, n_em=n_em, tol=tol)
        run.last_state = state
        res = predict(fitted)
        if variant == "case1":
            # predicted data also carry the BAU-level measurement bias
            extra = fitted.params.sigma2 * fitted.v_fine[cells]
            return res.mu[cells], res.sd[cells], extra
        return res.mu[cells], res.sd[cells]

    run.last_state = None
    return run


@functools.lru_cache(maxsize=4)
def _grid_S(n, nres, family):
    from .basis import auto_basis, build_S

    baus = grid_baus(n)
    basis = auto_basis(baus.manifold, [(0, 1), (0, 1)], nres=nres, family=family)
    return build_S(basis, baus)


def csv_predictor(path) -> Predictor:
    """Predictions supplied by an external tool.

    The CSV has columns ``replication,cell,mu,sd``.
    """
    table: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            table[(int(row["replication"]), int(row["cell"]))] = (float(row["mu"]),
                                                                   float(row["sd"]))

    def run(rep: Replication, cells: np.ndarray):
        try:
            vals = np.array([table[(rep.l, int(c))] for c in cells])
        except KeyError as exc:
            raise ValueError(f"external predictions missing replication/cell {exc}") from None
        return vals[:, 0], vals[:, 1]

    return run


# -------------------------------------------------------------- experiment

@dataclass
class ExperimentReport:
    config: SimulationConfig
    rows: list
    fit_iterations: list = field(default_factory=list)

    def values(self, predictor: str, metric: str, cls: str | None = None) -> np.ndarray:
        return np.array([r[metric] for r in self.rows
                         if r["predictor"] == predictor and (cls is None or r["class"] == cls)])

    def summary(self) -> dict:
        out: dict = {}
        for r in self.rows:
            d = out.setdefault(r["predictor"], {}).setdefault(r["class"], {})
            for k in ("rmspe", "rs", "i90", "i90_data", "crps"):
                if r.get(k) is not None:
                    d.setdefault(k, []).append(r[k])
        return {p: {c: {k: float(np.mean(v)) for k, v in d.items()} for c, d in cd.items()}
                for p, cd in out.items()}

    def write_csv(self, path) -> None:
        """Long format: one row per replication x class x predictor x metric."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["replication", "side", "class", "predictor", "metric", "value"])
            for r in self.rows:
                side, _, cls = r["class"].partition("_")
                for k in ("rmspe", "rs", "i90", "i90_data", "crps"):
                    if r.get(k) is not None:
                        w.writerow([r["replication"], side, cls, r["predictor"], k,
                                    repr(float(r[k]))])

    def write_summary(self, path) -> None:
        doc = {"config": asdict(self.config), "summary": self.summary(),
               "fit_iterations": self.fit_iterations}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)


def run_experiment(config: SimulationConfig, predictors: dict | None = None,
                   reference: str = "frk", replications=None) -> ExperimentReport:
    """Score each predictor on every replication and location class.

    Predictors map ``(replication, cells)`` to ``(mean, sd)`` or
    ``(mean, sd, extra)``, where ``extra`` is variance added on top of the
    measurement error when covering fresh data. ``RS`` is each predictor's
    RMSPE divided by the reference predictor's. Besides the four location
    classes, rows with class ``all`` pool every prediction location.
    """
    if predictors is None:
        predictors = {"frk": frk_predictor()}
    if reference not in predictors:
        raise ValueError(f"reference predictor {reference!r} is not among the predictors")
    design = make_design(config)
    cells = np.concatenate([design.pred[c] for c in CLASSES])
    bounds = np.cumsum([0] + [design.pred[c].size for c in CLASSES])
    slices = [(cls, slice(bounds[k], bounds[k + 1])) for k, cls in enumerate(CLASSES)]
    slices.append(("all", slice(0, cells.size)))
    rows, iters = [], []
    for l in (range(config.L) if replications is None else replications):
        rep = simulate(config, l, design)
        results = {}
        for name, pr in predictors.items():
            out = pr(rep, cells)
            mean, sd = np.asarray(out[0], float), np.asarray(out[1], float)
            extra = np.asarray(out[2], float) if len(out) > 2 else np.zeros(cells.size)
            if mean.shape != cells.shape or sd.shape != cells.shape:
                raise ValueError(f"predictor {name!r} returned the wrong number of values")
            results[name] = (mean, sd, extra)
            st = getattr(pr, "last_state", None)
            if st is not None:
                iters.append({"replication": l, "predictor": name,
                              "iterations": st.iteration, "converged": st.converged})
        for cls, sl in slices:
            idx = cells[sl]
            scores = {}
            for name, (mean, sd, extra) in results.items():
                scores[name] = score(rep.Y[idx], mean[sl], sd[sl], rep.Z_new[idx],
                                     rep.noise_var + extra[sl])
            ref = scores[reference].rmspe
            for name, s in scores.items():
                rows.append({"replication": l, "class": cls, "predictor": name,
                             "rmspe": s.rmspe, "rs": s.rmspe / ref if ref > 0 else float("nan"),
                             "i90": s.i90, "i90_data": s.i90_data, "crps": s.crps, "n": s.n})
    return ExperimentReport(config, rows, iters)
