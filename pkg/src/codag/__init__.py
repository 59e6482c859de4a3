"""Condensed DAG traffic assignment: construction, equilibrium and learning dynamics."""

from .builder import CoDAG, build_codag, expand_tree, build_partition, merge, load_codag, save_codag
from .dag import compute_depth_height, enumerate_routes, verify_structure, topological_orders
from .exceptions import (
    CodagError, ConfigurationError, CoverageError, DomainError, EnumerationLimitError,
    EstimationError, IllegalPartitionError, NetworkSchemaError, NotADAGError,
)
from .network import (
    ArcCorrespondence, LatencyFunction, OriginalNetwork, aggregate_flow, evaluate_latency,
    latency_primitive, load_network, save_network,
)

__version__ = "0.1.0"
