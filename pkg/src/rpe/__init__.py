"""Retrieval-based parameter ensembles.

Store adapter deltas keyed by dataset representation vectors, retrieve the
nearest ones for a new dataset, weight them, and merge.
"""

from .adapters import AdapterDelta, BaseParameters, LowRankPair, apply, materialize, weighted_sum
from .errors import (
    ConfigError,
    ConflictError,
    DomainError,
    FormatError,
    RPEError,
    SchemaError,
    ShapeError,
    StructureError,
)
from .registry import Registry, RegistryEntry, RetrievalResult, squared_distance
from .representation import FeatureSet, mean_pool, set_distance
from .weighting import (
    METHODS,
    SolverConfig,
    WeightVector,
    run_pipeline,
    weights_average,
    weights_linear,
    weights_linear_l1,
    weights_similarity,
    weights_top1,
)

__version__ = "0.1.0"
