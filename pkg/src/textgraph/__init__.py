"""textgraph: a small text encoder and a relational GNN, trained stage-wise
on text-attributed heterogeneous graphs, on top of a numpy autodiff core."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, no_grad  # noqa: F401
