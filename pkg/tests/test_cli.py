import json

import numpy as np
import pytest

from frk.baus import read_csv
from frk.cli import EXIT_CONFIG, EXIT_DATA, main
from frk.em import fit
from frk.predict import predict
from frk.store import load_model, save_model
from helpers import random_model


@pytest.fixture(scope="module")
def meuse_like(tmp_path_factory):
    d = tmp_path_factory.mktemp("meuse")
    rng = np.random.default_rng(0)
    pts = rng.uniform([178600, 329700], [181400, 333600], size=(155, 2))
    z = 5 + np.sin(pts[:, 0] / 500) + np.cos(pts[:, 1] / 700) + rng.normal(0, 0.3, 155)
    lines = ["x,y,z,std"] + [f"{x!r},{y!r},{v!r},0.3" for (x, y), v in zip(pts.tolist(), z.tolist())]
    (d / "data.csv").write_text("\n".join(lines) + "\n")
    cfg = {"data": "data.csv", "nres": 2, "n_cells": 40, "n_em": 200, "tol": 0.01,
           "k_type": "unstructured", "average_in_bau": False}
    (d / "fit.json").write_text(json.dumps(cfg))
    out = d / "fit"
    assert main(["fit", "--config", str(d / "fit.json"), "--output", str(out)]) == 0
    return d, out


def test_fit_report_monotone(meuse_like):
    _, out = meuse_like
    rep = json.loads((out / "fit_report.json").read_text())
    assert rep["m"] == 155
    tr = np.array(rep["loglik_trace"])
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[1:]))
    assert rep["iterations"] >= 1
    assert (out / "model.json").exists() and (out / "model.bin").exists()


def test_predict_default_rows_and_rasters(meuse_like):
    d, out = meuse_like
    pout = d / "pred"
    assert main(["predict", "--model", str(out / "model.json"), "--output", str(pout)]) == 0
    tab = read_csv(pout / "predictions.csv")
    model = load_model(out / "model.json")
    assert tab["mu"].size == model.N
    assert np.allclose(tab["var"], tab["sd"] ** 2, rtol=1e-12)
    nx, ny = model.baus.grid_shape()
    assert (pout / "mu.pgm").read_bytes().startswith(f"P5\n{nx} {ny}\n255\n".encode())
    assert len((pout / "sd.pgm").read_bytes()) == len(f"P5\n{nx} {ny}\n255\n") + nx * ny


def test_predict_super_grid_regions(meuse_like):
    d, out = meuse_like
    model = load_model(out / "model.json")
    lo = model.baus.centroids.min(axis=0)
    rows = ["region_id,xmin,xmax,ymin,ymax"]
    k = 0
    for x in np.arange(lo[0], lo[0] + 2400, 600.0):
        for y in np.arange(lo[1], lo[1] + 3600, 600.0):
            rows.append(f"{k},{float(x)!r},{float(x + 600)!r},{float(y)!r},{float(y + 600)!r}")
            k += 1
    (d / "regions.csv").write_text("\n".join(rows) + "\n")
    pout = d / "pred_regions"
    assert main(["predict", "--model", str(out / "model.json"),
                 "--regions", str(d / "regions.csv"), "--output", str(pout)]) == 0
    tab = read_csv(pout / "predictions.csv")
    assert tab["mu"].size == k
    assert not (pout / "mu.pgm").exists()


def test_predict_region_outside_domain(meuse_like, capsys):
    d, out = meuse_like
    (d / "bad.csv").write_text("region_id,xmin,xmax,ymin,ymax\n1,0,1,0,1\n7,0,10,0,10\n")
    code = main(["predict", "--model", str(out / "model.json"), "--regions", str(d / "bad.csv"),
                 "--output", str(d / "bad")])
    assert code == EXIT_DATA
    assert "region 1" in capsys.readouterr().err


def test_predict_variant_mismatch(meuse_like):
    d, out = meuse_like
    args = ["predict", "--model", str(out / "model.json"), "--output", str(d / "x")]
    assert main(args + ["--variant", "case1"]) == EXIT_CONFIG
    (d / "pc.json").write_text(json.dumps({"obs_fs": True}))
    assert main(args + ["--config", str(d / "pc.json")]) == EXIT_CONFIG


def test_rerun_is_byte_identical(meuse_like, tmp_path):
    d, _ = meuse_like
    outs = []
    for k in range(2):
        o = tmp_path / f"run{k}"
        assert main(["fit", "--config", str(d / "fit.json"), "--output", str(o)]) == 0
        assert main(["predict", "--model", str(o / "model.json"), "--output", str(o)]) == 0
        outs.append(o)
    for name in ("model.bin", "predictions.csv", "mu.pgm", "sd.pgm"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_fit_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("x,y,z,std\n")
    assert main(["fit", "--data", str(tmp_path / "empty.csv"), "--output", str(tmp_path)]) == EXIT_DATA
    (tmp_path / "cfg.json").write_text(json.dumps({"data": "d.csv", "bogus": 1}))
    assert main(["fit", "--config", str(tmp_path / "cfg.json")]) == EXIT_CONFIG
    assert main(["fit", "--output", str(tmp_path)]) == EXIT_CONFIG
    (tmp_path / "nostd.csv").write_text("x,y,z\n0,0,1\n1,1,2\n0,1,3\n")
    assert main(["fit", "--data", str(tmp_path / "nostd.csv"),
                 "--output", str(tmp_path)]) == EXIT_DATA


def test_huge_tolerance_stops_after_one_iteration(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.uniform(size=(60, 2))
    lines = ["x,y,z,std"] + [f"{x!r},{y!r},{v!r},0.2" for (x, y), v in
                             zip(pts.tolist(), rng.normal(size=60).tolist())]
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    assert main(["fit", "--data", str(tmp_path / "d.csv"), "--tol", "1e9",
                 "--output", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "fit_report.json").read_text())
    assert rep["iterations"] == 1 and rep["converged"]


def test_simulate_writes_parseable_csv(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"n": 20, "m": 50, "seed": 3}))
    assert main(["simulate", "--config", str(tmp_path / "s.json"), "--output", str(tmp_path)]) == 0
    field = read_csv(tmp_path / "field.csv")
    data = read_csv(tmp_path / "data.csv")
    assert field["y_true"].size == 400 and data["z"].size == 50
    assert np.array_equal(field["y_true"][data["cell"].astype(int)].size, 50)
    (tmp_path / "bad.json").write_text(json.dumps({"n": 20, "colour": 1}))
    assert main(["simulate", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_simulated_data_fit_round_trip(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"n": 20, "m": 80}))
    assert main(["simulate", "--config", str(tmp_path / "s.json"), "--output", str(tmp_path)]) == 0
    assert main(["fit", "--data", str(tmp_path / "data.csv"), "--n-em", "30",
                 "--output", str(tmp_path / "f")]) == 0


def test_benchmark_smoke(tmp_path):
    cfg = {"n": 20, "m": 60, "L": 2, "n_pred": 20, "predictors": ["frk", "exact"],
           "frk": {"nres": 1}, "n_em": 50}
    (tmp_path / "b.json").write_text(json.dumps(cfg))
    assert main(["benchmark", "--config", str(tmp_path / "b.json"), "--output", str(tmp_path)]) == 0
    tab = read_csv(tmp_path / "scores.csv")
    assert set(tab["replication"].astype(int)) == {0, 1}
    assert set(tab["side"]) == {"LH", "RH", "all"}
    summary = json.loads((tmp_path / "summary.json").read_text())["summary"]
    assert set(summary["frk"]) == {"LH_obs", "LH_unobs", "RH_obs", "RH_unobs", "all"}


def test_benchmark_exact_self_comparison(tmp_path):
    cfg = {"n": 20, "m": 60, "L": 1, "n_pred": 20, "predictors": ["exact"],
           "reference": "exact"}
    (tmp_path / "b.json").write_text(json.dumps(cfg))
    assert main(["benchmark", "--config", str(tmp_path / "b.json"), "--output", str(tmp_path)]) == 0
    tab = read_csv(tmp_path / "scores.csv")
    rs = tab["value"][np.array(tab["metric"]) == "rs"]
    assert rs.size > 0 and np.all(rs == 1.0)
    (tmp_path / "bad.json").write_text(json.dumps({"n": 20, "predictors": ["lattice"]}))
    assert main(["benchmark", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_model_store_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    for variant, kt in (("case2", "block_exponential"), ("case1", "unstructured")):
        m = random_model(rng, variant=variant, k_type=kt, covariate=True, n_boxes=2)
        f, _ = fit(m, n_em=5)
        path = tmp_path / f"{variant}.json"
        save_model(f, path)
        g = load_model(path)
        for a, b in ((f.params.alpha, g.params.alpha), (f.K_of(), g.K_of()),
                     (f.mu_eta, g.mu_eta), (f.Sigma_eta, g.Sigma_eta), (f.Z, g.Z)):
            assert np.array_equal(a, b)
        assert f.params.sigma2 == g.params.sigma2 and f.sigma2_eps == g.sigma2_eps
        assert f.loglik_trace == g.loglik_trace
        assert np.array_equal(predict(f).var, predict(g).var)
    (tmp_path / "bad.json").write_text(json.dumps({"format": "frk-model", "version": 99}))
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.json")
