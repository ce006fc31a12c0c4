"""Export frame-wise CNN backbone embeddings to TSEDEMB1 files."""

from .runner import ExportError, ExportJob, LoadedModel, export, load_model
from .tsedemb import read_embeddings, write_embeddings

__all__ = [
    "ExportError",
    "ExportJob",
    "LoadedModel",
    "export",
    "load_model",
    "read_embeddings",
    "write_embeddings",
]
