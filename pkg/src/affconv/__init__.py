"""Graph and mesh convolution operators with affine and residual skip
connections, scattered-data RBF interpolation, and the small reverse-mode
autodiff core that drives desk-scale training."""

from .graphs import (Graph, Mesh, PseudoCoords, SparseMatrix, degree_vector,
                     gcn_propagation_matrix, geodesic_distances,
                     normalized_adjacency, pseudo_coordinates,
                     spiral_sequences)
from .autodiff import Param, Tape, Tensor, backward, grad_check
from .operators import LayerSpec, OperatorParams, init_params, layer_forward

__all__ = [
    "Graph", "Mesh", "PseudoCoords", "SparseMatrix", "degree_vector",
    "gcn_propagation_matrix", "geodesic_distances", "normalized_adjacency",
    "pseudo_coordinates", "spiral_sequences", "Param", "Tape", "Tensor",
    "backward", "grad_check", "LayerSpec", "OperatorParams", "init_params",
    "layer_forward",
]

__version__ = "0.1.0"
