"""Saving and loading fitted models.

A model is a JSON manifest plus a sidecar of raw little-endian arrays, so
every parameter round-trips exactly. The manifest records each array's
offset, dtype and shape inside the sidecar.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .basis import basis_from_dict
from .baus import BauSet
from .manifold import manifold_from_config
from .model import Params, SreModel

FORMAT = "frk-model"
VERSION = 1


class _Sidecar:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def put(self, a) -> dict:
        a = np.asarray(a)
        dt = "<f8" if a.dtype.kind == "f" else "<i8"
        buf = np.ascontiguousarray(a, dtype=dt).tobytes()
        entry = {"offset": self.offset, "dtype": dt, "shape": list(a.shape)}
        self.chunks.append(buf)
        self.offset += len(buf)
        return entry

    def put_matrix(self, M) -> dict:
        if sp.issparse(M):
            M = sp.csr_matrix(M)
            return {"sparse": True, "shape": list(M.shape), "data": self.put(M.data),
                    "indices": self.put(M.indices), "indptr": self.put(M.indptr)}
        return {"sparse": False, "array": self.put(M)}


def _get(blob: bytes, e: dict) -> np.ndarray:
    n = int(np.prod(e["shape"])) if e["shape"] else 1
    a = np.frombuffer(blob, dtype=e["dtype"], count=n, offset=e["offset"])
    return a.reshape(e["shape"]).astype(np.float64 if e["dtype"] == "<f8" else np.int64)


def _get_matrix(blob: bytes, e: dict):
    if e["sparse"]:
        return sp.csr_matrix((_get(blob, e["data"]), _get(blob, e["indices"]),
                              _get(blob, e["indptr"])), shape=tuple(e["shape"]))
    return _get(blob, e["array"])


def save_model(model: SreModel, path) -> tuple[Path, Path]:
    """Write ``path`` (manifest) and ``path`` with suffix ``.bin`` (arrays)."""
    if not model.fitted:
        raise ValueError("only fitted models can be saved")
    path = Path(path)
    side = path.with_suffix(".bin")
    sc = _Sidecar()
    b, p = model.baus, model.params
    arrays = {
        "centroids": sc.put(b.centroids),
        "fs": sc.put(b.fs),
        "covariates": sc.put(b.covariates),
        "Z": sc.put(model.Z),
        "v_eps": sc.put(model.v_eps),
        "alpha": sc.put(p.alpha),
        "K": sc.put(p.K),
        "mu_eta": sc.put(model.mu_eta),
        "Sigma_eta": sc.put(model.Sigma_eta),
    }
    if b.cellsize is not None:
        arrays["cellsize"] = sc.put(b.cellsize)
    if b.fs_delta is not None:
        arrays["fs_delta"] = sc.put(b.fs_delta)
    if p.vartheta is not None:
        arrays["vartheta"] = sc.put(p.vartheta)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "sidecar": side.name,
        "variant": model.variant,
        "k_type": model.k_type,
        "manifold": b.manifold.to_dict(),
        "covariate_names": list(b.covariate_names),
        "basis": model.basis.to_dict(),
        "sigma2": float(p.sigma2).hex(),
        "sigma2_eps": float(model.sigma2_eps).hex(),
        "loglik_trace": [float(v).hex() for v in model.loglik_trace],
        "arrays": arrays,
        "S": sc.put_matrix(model.S),
        "C_Z": sc.put_matrix(model.C_Z),
    }
    side.write_bytes(b"".join(sc.chunks))
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path, side


def load_model(path) -> SreModel:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a saved model")
    if manifest.get("version") != VERSION:
        raise ValueError(f"{path}: model format version {manifest.get('version')} "
                         f"is not supported (expected {VERSION})")
    blob = (path.parent / manifest["sidecar"]).read_bytes()
    a = {k: _get(blob, e) for k, e in manifest["arrays"].items()}
    manifold = manifold_from_config(manifest["manifold"])
    baus = BauSet(manifold, a["centroids"], a.get("cellsize"), a["fs"], a["covariates"],
                  list(manifest["covariate_names"]), a.get("fs_delta"))
    basis = basis_from_dict(manifest["basis"])
    model = SreModel(baus, basis, _get_matrix(blob, manifest["S"]),
                     _get_matrix(blob, manifest["C_Z"]), a["Z"], a["v_eps"],
                     float.fromhex(manifest["sigma2_eps"]), manifest["variant"],
                     manifest["k_type"])
    params = Params(a["alpha"], a["K"], float.fromhex(manifest["sigma2"]), a.get("vartheta"))
    return model.with_params(params, fitted=True, mu_eta=a["mu_eta"],
                             Sigma_eta=a["Sigma_eta"],
                             loglik_trace=[float.fromhex(v) for v in manifest["loglik_trace"]])
