"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right family
matters more than the message text.
"""


class LatentScoutError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LatentScoutError):
    """Invalid or inconsistent run configuration."""


class UsageError(LatentScoutError):
    """An API contract was violated by the caller (bad shapes, bad arguments)."""


class DimensionError(UsageError):
    """Array shapes incompatible with the requested operation."""


class GraphError(LatentScoutError):
    """Problems with causal graph payloads."""


class GraphParseError(GraphError):
    """Structurally invalid graph document (bad ids, duplicate edges, ...)."""


class CycleError(GraphParseError):
    """The directed part of the graph contains a cycle."""


class AmbiguousOrientationError(GraphError):
    """An unoriented edge prevents a well-defined Markov blanket under the
    strict policy."""


class BackendError(LatentScoutError):
    """A text-generation backend failed (network, HTTP status, bad payload)."""


class FixtureError(BackendError):
    """A mock backend or recorded fixture is missing a required entry."""


class EpisodeAborted(BackendError):
    """An episode could not finish; carries the partial trace for debugging."""

    def __init__(self, message: str, partial_trace=None):
        super().__init__(message)
        self.partial_trace = partial_trace


class RetrievalError(LatentScoutError):
    """An evidence source failed to answer a search request."""


class PayloadParseError(RetrievalError):
    """A source answered, but the payload did not parse."""


class InvariantViolation(LatentScoutError):
    """An internal consistency check failed; indicates a bug, not bad input."""
