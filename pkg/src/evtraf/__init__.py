"""Uncertainty-aware traffic forecasting on road graphs.

Forecasts speed and flow over a road network with a recurrent
graph-convolution model whose outputs parameterize an evidential
(normal-inverse-gamma) distribution, so every prediction carries
separate data- and knowledge-uncertainty estimates.  Includes a
macroscopic traffic simulator for generating corpora and tools for
uncertainty-driven dataset distillation.
"""

from ._kernels import BACKEND
from .corpus import Corpus, Sample, make_corpus
from .errors import (
    CflError,
    CheckpointFormatError,
    CorpusFormatError,
    DegreeSelectionError,
    DomainError,
    EvtrafError,
    GraphFormatError,
    ShapeMismatchError,
    TrainingDivergedError,
    UsageError,
    ValidationError,
)
from .evidential import (
    NigParams,
    UncertaintyBreakdown,
    decompose,
    nig_log_density,
    nll_loss,
    ratio_regularizer,
    student_t_log_pdf,
    total_loss,
)
from .lwr import FundamentalDiagram, Incident, Scenario, TrafficField, simulate
from .model import DgcrnnModel, ModelConfig
from .roadgraph import RoadGraph, RoadNode, load_graph, select_degree
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainingLog, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CflError",
    "CheckpointFormatError",
    "Corpus",
    "CorpusFormatError",
    "DegreeSelectionError",
    "DgcrnnModel",
    "DomainError",
    "EvtrafError",
    "FundamentalDiagram",
    "GraphFormatError",
    "Incident",
    "ModelConfig",
    "NigParams",
    "RoadGraph",
    "RoadNode",
    "Sample",
    "Scenario",
    "ShapeMismatchError",
    "Tensor",
    "TrafficField",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainingLog",
    "UncertaintyBreakdown",
    "UsageError",
    "ValidationError",
    "decompose",
    "load_graph",
    "make_corpus",
    "nig_log_density",
    "nll_loss",
    "no_grad",
    "ratio_regularizer",
    "select_degree",
    "simulate",
    "student_t_log_pdf",
    "total_loss",
    "train",
    "__version__",
]
