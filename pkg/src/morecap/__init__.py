"""Relation-aware 3D dense captioning: spatial layout graphs, object-centric
triplet attention, and a GRU caption decoder, on a numpy autodiff engine."""

from .autodiff import ContractError, ShapeError, Tape, Tensor, backward, grad_check
from .config import RunConfig
from .geometry import Box3, iou3d, knn_graph, vertical_case

__all__ = [
    "Box3",
    "ContractError",
    "RunConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "iou3d",
    "knn_graph",
    "vertical_case",
]

__version__ = "0.1.0"
