"""Neural preconditioners for flexible GMRES trained through Krylov subspace angles."""

from .estimator import NeuralPreconditioner
from .krylov import ag_m, fgmres
from .problems import ProblemInstance, make_dataset
from .unet import UNetDescriptor, init_params

__version__ = "0.1.0"

__all__ = [
    "NeuralPreconditioner",
    "ProblemInstance",
    "UNetDescriptor",
    "ag_m",
    "fgmres",
    "init_params",
    "make_dataset",
]
