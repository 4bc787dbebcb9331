"""Command-line front end: ``frk fit|predict|simulate|benchmark``.

Settings come from a JSON file (``--config``); command-line flags override
it. Exit codes: 0 success, 2 bad configuration, 3 bad data, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import bench
from .basis import auto_basis, basis_from_json
from .baus import (auto_baus, baus_from_csv, footprint_from_polygon, observations_from_table,
                   read_csv, require_numeric)
from .em import EMDivergence, fit
from .linalg import FactorisationError
from .manifold import manifold_from_config
from .model import assemble
from .predict import predict, super_grid
from .store import load_model, save_model

log = logging.getLogger("frk")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

FIT_DEFAULTS = {
    "data": None, "baus": None, "basis": None, "manifold": "plane", "response": "z",
    "covariates": [], "std_column": "std", "meas_error": "given", "cellsize": None,
    "n_cells": 50, "nres": 2, "family": "bisquare", "max_basis": None,
    "variant": "case2", "k_type": "block_exponential", "average_in_bau": True,
    "S_method": "centroid", "n_em": 100, "tol": 0.01, "seed": 0, "output": ".",
}
PREDICT_DEFAULTS = {"model": None, "regions": None, "super_grid": None, "variant": None,
                    "obs_fs": None, "output": ".", "raster": True, "seed": 0}
SIM_KEYS = set(bench.SimulationConfig.__dataclass_fields__)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@contextmanager
def stage(code: int, what: str):
    """Turn library errors raised inside the block into a :class:`CliError`."""
    try:
        yield
    except CliError:
        raise
    except (FactorisationError, EMDivergence, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise CliError(EXIT_NUMERIC, f"{what}: {exc}") from exc
    except (ValueError, KeyError, TypeError, OSError) as exc:
        raise CliError(code, f"{what}: {exc}") from exc


# ----------------------------------------------------------------- config

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frk", description="Fixed-rank kriging")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("fit", "predict", "simulate", "benchmark"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path)
        s.add_argument("--seed", type=int)
        s.add_argument("--output", type=Path)
        if name == "fit":
            s.add_argument("--data", type=Path)
            s.add_argument("--baus", type=Path)
            s.add_argument("--basis", type=Path)
            s.add_argument("--n-em", dest="n_em", type=int)
            s.add_argument("--tol", type=float)
            s.add_argument("--k-type", dest="k_type",
                           choices=["unstructured", "block_exponential"])
            s.add_argument("--average-in-bau", dest="average_in_bau", type=_bool)
        if name in ("fit", "predict"):
            s.add_argument("--variant", choices=["case1", "case2"])
        if name == "predict":
            s.add_argument("--model", type=Path)
            s.add_argument("--regions", type=Path)
        if name == "benchmark":
            s.add_argument("--n-em", dest="n_em", type=int)
            s.add_argument("--tol", type=float)
    return p


def load_config(args, defaults: dict | None) -> dict:
    cfg = dict(defaults or {})
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError(EXIT_CONFIG, f"{args.config}: top level must be an object")
        if defaults is not None:
            unknown = set(loaded) - set(defaults)
            if unknown:
                raise CliError(EXIT_CONFIG, f"{args.config}: unknown keys {sorted(unknown)}")
        cfg.update(loaded)
        base = Path(args.config).parent
        for key in ("data", "baus", "basis", "model", "regions"):
            if isinstance(cfg.get(key), str):
                cfg[key] = str(base / cfg[key])
    for k, v in vars(args).items():
        if k not in ("config", "command", "verbose") and v is not None:
            cfg[k] = str(v) if isinstance(v, Path) else v
    return cfg


def _output_dir(cfg) -> Path:
    out = Path(cfg.get("output") or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot create output directory {out}: {exc}") from None
    return out


# ------------------------------------------------------------------ output

def write_pgm(path, values, shape) -> None:
    """8-bit greyscale raster with a linear min-max stretch, top row = max y."""
    nx, ny = shape
    img = np.asarray(values, float).reshape(ny, nx)[::-1]
    lo, hi = np.nanmin(img), np.nanmax(img)
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def _fmt(x: float) -> str:
    return repr(float(x))


def write_predictions(path, ids, res, coords=None, coord_names=()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", *coord_names, "mu", "sd", "var"])
        for i, rid in enumerate(ids):
            c = [_fmt(v) for v in coords[i]] if coords is not None else []
            w.writerow([rid, *c, _fmt(res.mu[i]), _fmt(res.sd[i]), _fmt(res.var[i])])


# --------------------------------------------------------------------- fit

def _data_extent(tab, manifold):
    names = ["x", "y"][: manifold.spatial_dim]
    require_numeric(tab, names + ["xmin", "xmax", "ymin", "ymax", "t"])
    if all(k in tab for k in ("xmin", "xmax", "ymin", "ymax")):
        ext = [(tab["xmin"].min(), tab["xmax"].max()), (tab["ymin"].min(), tab["ymax"].max())]
    else:
        for c in names:
            if c not in tab:
                raise ValueError(f"coordinate column {c!r} not found")
        ext = [(tab[c].min(), tab[c].max()) for c in names]
    if manifold.is_st:
        if "t" not in tab:
            raise ValueError("time column 't' not found")
        ext.append((tab["t"].min(), tab["t"].max()))
    return np.array(ext, dtype=float)


def _make_baus(cfg, tab, manifold):
    if cfg["baus"]:
        return baus_from_csv(cfg["baus"], manifold, cfg["cellsize"])
    ext = _data_extent(tab, manifold)
    width = ext[:, 1] - ext[:, 0]
    if cfg["cellsize"] is not None:
        cs = np.broadcast_to(np.asarray(cfg["cellsize"], float), (ext.shape[0],)).copy()
    else:
        if np.any(width <= 0):
            raise ValueError("data have zero extent along an axis; set cellsize")
        cs = width / cfg["n_cells"]
    # half a cell of margin keeps points on the upper edge inside
    ext = np.column_stack([ext[:, 0] - cs / 2, ext[:, 1] + cs / 2])
    return auto_baus(manifold, cs, ext)


def _attach_covariates(baus, names, from_csv: bool):
    missing = [c for c in names if c not in baus.covariate_names]
    if not missing:
        keep = ["intercept", *names]
        idx = [baus.covariate_names.index(c) for c in keep]
        baus.covariates = baus.covariates[:, idx]
        baus.covariate_names = keep
        return baus
    coord = {"x": 0, "y": 1}
    if from_csv or any(c not in coord for c in missing):
        raise ValueError(f"covariates {missing} are not BAU columns")
    vals = np.column_stack([baus.centroids[:, coord[c]] for c in missing])
    return baus.with_covariates(vals, missing)


def cmd_fit(cfg: dict) -> dict:
    out = _output_dir(cfg)
    with stage(EXIT_CONFIG, "configuration"):
        manifold = manifold_from_config(cfg["manifold"])
        if cfg["data"] is None:
            raise ValueError("no data file given")
        me = cfg["meas_error"]
        if not (me in ("given", "estimate") or isinstance(me, (int, float))):
            raise ValueError(f"meas_error must be 'given', 'estimate' or a number, not {me!r}")
    with stage(EXIT_DATA, f"data {cfg['data']}"):
        tab = read_csv(cfg["data"])
        if cfg["response"] not in tab:
            raise ValueError(f"response column {cfg['response']!r} not found")
        baus = _make_baus(cfg, tab, manifold)
        baus = _attach_covariates(baus, list(cfg["covariates"]), bool(cfg["baus"]))
        std_col = cfg["std_column"] if cfg["meas_error"] == "given" else None
        if std_col and std_col not in tab:
            raise ValueError(f"std column {std_col!r} not found; set meas_error")
        obs = observations_from_table(tab, baus, cfg["response"], std_col)
        # the observation table's own extra columns are not model inputs
        obs.columns = tuple(c for c in obs.columns if c in baus.covariate_names)
    with stage(EXIT_CONFIG, "basis"):
        if cfg["basis"]:
            basis = basis_from_json(Path(cfg["basis"]).read_text(encoding="utf-8"))
        else:
            lo = baus.centroids.min(axis=0) - baus.cellsize / 2
            hi = baus.centroids.max(axis=0) + baus.cellsize / 2
            basis = auto_basis(manifold, np.column_stack([lo, hi]), cfg["nres"],
                               cfg["family"], cfg["max_basis"])
    with stage(EXIT_DATA, "model assembly"):
        model = assemble(baus, basis, obs, cfg["variant"], cfg["k_type"], cfg["meas_error"],
                         bool(cfg["average_in_bau"]), cfg["S_method"])
    with stage(EXIT_NUMERIC, "fitting"):
        fitted, state = fit(model, n_em=int(cfg["n_em"]), tol=float(cfg["tol"]))
    paths = save_model(fitted, out / "model.json")
    p = fitted.params
    report = {
        "seed": cfg["seed"],
        "iterations": state.iteration,
        "converged": state.converged,
        "loglik_trace": state.loglik,
        "sigma2_warnings": state.sigma2_warnings,
        "m": fitted.m, "r": fitted.r, "N": fitted.N,
        "variant": fitted.variant, "k_type": fitted.k_type,
        "alpha": dict(zip(fitted.baus.covariate_names, p.alpha.tolist())),
        "sigma2": p.sigma2, "sigma2_eps": fitted.sigma2_eps,
        "vartheta": None if p.vartheta is None else p.vartheta.tolist(),
        "model": str(paths[0]),
    }
    (out / "fit_report.json").write_text(json.dumps(report, indent=1), encoding="utf-8")
    log.info("fit: %d iterations, converged=%s", state.iteration, state.converged)
    return report


# ----------------------------------------------------------------- predict

def _read_regions(path, baus):
    tab = read_csv(path)
    need = ("xmin", "xmax", "ymin", "ymax")
    missing = [c for c in need if c not in tab]
    if missing:
        raise ValueError(f"{path}: unknown region layout, missing columns {missing}")
    require_numeric(tab, [*need, "region_id"], str(path))
    ids = tab["region_id"].astype(np.int64) if "region_id" in tab else np.arange(tab["xmin"].size)
    fps = []
    for j, rid in enumerate(ids):
        box = [(tab["xmin"][j], tab["xmax"][j]), (tab["ymin"][j], tab["ymax"][j])]
        try:
            fps.append(footprint_from_polygon(baus, box))
        except ValueError as exc:
            raise ValueError(f"region {rid}: {exc}") from None
    return list(ids), fps


def cmd_predict(cfg: dict) -> dict:
    out = _output_dir(cfg)
    with stage(EXIT_CONFIG, "model"):
        if not cfg.get("model"):
            raise ValueError("no model file given")
        model = load_model(cfg["model"])
        want = cfg.get("variant")
        if cfg.get("obs_fs") is not None:
            implied = "case1" if cfg["obs_fs"] else "case2"
            if want is not None and want != implied:
                raise ValueError(f"obs_fs={cfg['obs_fs']} contradicts variant={want}")
            want = implied
        if want is not None and want != model.variant:
            raise ValueError(f"model was fitted as {model.variant}, not {want}")
    baus = model.baus
    coords, names = None, ()
    with stage(EXIT_DATA, "prediction regions"):
        if cfg.get("regions"):
            ids, fps = _read_regions(cfg["regions"], baus)
        elif cfg.get("super_grid") is not None:
            fps = super_grid(baus, cfg["super_grid"])
            ids = list(range(len(fps)))
        else:
            fps = None
            ids = list(range(baus.N))
            coords = baus.centroids
            names = ("x", "y", "t")[: baus.manifold.dim] if not baus.manifold.is_st else \
                ("x", "y")[: baus.manifold.spatial_dim] + ("t",)
    with stage(EXIT_NUMERIC, "prediction"):
        res = predict(model, fps)
    write_predictions(out / "predictions.csv", ids, res, coords, names)
    shape = baus.grid_shape() if fps is None else None
    rasters = []
    if cfg.get("raster", True) and shape is not None:
        for name, vals in (("mu", res.mu), ("sd", res.sd)):
            write_pgm(out / f"{name}.pgm", vals, shape)
            rasters.append(f"{name}.pgm")
    return {"rows": len(ids), "rasters": rasters}


# ---------------------------------------------------------------- simulate

def _sim_config(cfg) -> bench.SimulationConfig:
    with stage(EXIT_CONFIG, "simulation settings"):
        return bench.SimulationConfig.from_dict({k: v for k, v in cfg.items() if k in SIM_KEYS})


def cmd_simulate(cfg: dict) -> dict:
    extra = set(cfg) - SIM_KEYS - {"output", "replication"}
    if extra:
        raise CliError(EXIT_CONFIG, f"unknown simulation settings {sorted(extra)}")
    out = _output_dir(cfg)
    sc = _sim_config(cfg)
    l = int(cfg.get("replication", 0))
    with stage(EXIT_NUMERIC, "simulation"):
        rep = bench.simulate(sc, l)
    X = rep.X
    with open(out / "field.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "x", "y", "y_true"])
        for i in range(X.shape[0]):
            w.writerow([i, _fmt(X[i, 0]), _fmt(X[i, 1]), _fmt(rep.Y[i])])
    sd = np.sqrt(rep.noise_var)
    with open(out / "data.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "std", "cell"])
        for j, i in enumerate(rep.design.obs):
            w.writerow([_fmt(X[i, 0]), _fmt(X[i, 1]), _fmt(rep.Z[j]), _fmt(sd), int(i)])
    write_pgm(out / "field.pgm", rep.Y, (sc.n, sc.n))
    return {"cells": int(X.shape[0]), "m": int(rep.Z.size), "noise_var": rep.noise_var}


# --------------------------------------------------------------- benchmark

def cmd_benchmark(cfg: dict) -> dict:
    out = _output_dir(cfg)
    extra = set(cfg) - SIM_KEYS - {"predictors", "reference", "external", "frk", "output",
                                   "n_em", "tol", "replications"}
    if extra:
        raise CliError(EXIT_CONFIG, f"unknown benchmark settings {sorted(extra)}")
    sc = _sim_config(cfg)
    with stage(EXIT_CONFIG, "predictors"):
        frk_opts = dict(cfg.get("frk") or {})
        for k in ("n_em", "tol"):
            if cfg.get(k) is not None:
                frk_opts[k] = cfg[k]
        preds = {}
        for name in cfg.get("predictors", ["frk", "exact"]):
            if name == "frk":
                preds[name] = bench.frk_predictor(**frk_opts)
            elif name == "exact":
                preds[name] = bench.exact_predictor
            else:
                raise ValueError(f"unknown built-in predictor {name!r}")
        for name, path in (cfg.get("external") or {}).items():
            preds[name] = bench.csv_predictor(path)
        reference = cfg.get("reference", "frk" if "frk" in preds else next(iter(preds)))
    with stage(EXIT_NUMERIC, "benchmark"):
        report = bench.run_experiment(sc, preds, reference, cfg.get("replications"))
    report.write_csv(out / "scores.csv")
    report.write_summary(out / "summary.json")
    return report.summary()


COMMANDS = {
    "fit": (cmd_fit, FIT_DEFAULTS),
    "predict": (cmd_predict, PREDICT_DEFAULTS),
    "simulate": (cmd_simulate, None),
    "benchmark": (cmd_benchmark, None),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    fn, defaults = COMMANDS[args.command]
    try:
        cfg = load_config(args, defaults)
        result = fn(cfg)
    except CliError as exc:
        print(f"frk {args.command}: {exc}", file=sys.stderr)
        return exc.code
    print(json.dumps(result, indent=1, default=str) if args.verbose else "ok")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
