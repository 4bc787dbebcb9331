"""Fixed-rank kriging: spatial random effects models over basic areal units,
fitted by EM, with exact change-of-support prediction."""
from .basis import BasisSet, TensorBasisSet, auto_basis, build_S, local_basis, tensor_basis
from .baus import BauSet, Footprint, Observations, auto_baus, build_incidence
from .em import fit, loglik
from .manifold import plane, real_line, sphere, st_plane, st_sphere
from .model import Params, SreModel, assemble
from .predict import PredictionResult, predict, super_grid
from .store import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "BasisSet", "TensorBasisSet", "auto_basis", "build_S", "local_basis", "tensor_basis",
    "BauSet", "Footprint", "Observations", "auto_baus", "build_incidence",
    "fit", "loglik", "plane", "real_line", "sphere", "st_plane", "st_sphere",
    "Params", "SreModel", "assemble", "PredictionResult", "predict", "super_grid",
    "load_model", "save_model",
]
