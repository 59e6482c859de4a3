"""Exception types raised across the package."""


class CodagError(Exception):
    """Base class for all package errors."""


class DomainError(CodagError, ValueError):
    """A numeric argument lies outside the domain of a function."""


class NetworkSchemaError(CodagError, ValueError):
    """A network or CoDAG description is malformed or violates its invariants."""


class EnumerationLimitError(CodagError):
    """Route enumeration exceeded the configured cap."""


class NotADAGError(CodagError):
    """A graph that must be acyclic contains a directed cycle."""


class CoverageError(CodagError):
    """An arc of a DAG lies on no origin-destination route."""


class IllegalPartitionError(CodagError):
    """Merging a partition of the route tree produced an invalid graph."""


class ConfigurationError(CodagError, ValueError):
    """Simulation parameters violate the step-size or rate constraints."""


class EstimationError(CodagError):
    """Not enough samples to form a convergence estimate."""
