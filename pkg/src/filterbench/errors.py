"""Exception hierarchy shared by all filterbench modules."""


class FilterBenchError(Exception):
    """Base class for all toolkit errors."""


# -- input validation --------------------------------------------------------

class ParseError(FilterBenchError):
    """A file could not be parsed (malformed row, bad magic, truncated data)."""


class ValidationError(FilterBenchError):
    """Data violates a structural invariant (ragged manifest, duplicate id, ...)."""


class DimMismatch(ValidationError):
    """Vector dimension differs from the expected embedding dimension."""


class DimensionMismatch(ValidationError):
    """Image dimensions differ where identical shapes are required."""


class NonFiniteValue(ValidationError):
    """A vector component is NaN or infinite."""


class DuplicateKey(ValidationError):
    """An (image, variant) key occurs twice."""


class ZeroNorm(ValidationError):
    """A vector has zero Euclidean norm where a direction is required."""


class OutOfRange(ValidationError):
    """A scalar falls outside its documented domain."""


class EmptyInput(ValidationError):
    """An operation received an empty collection where at least one item is required."""


# -- protocol/scoring --------------------------------------------------------

class TooFewSubjects(ValidationError):
    """Not enough subjects for the requested pairing or split."""


class MissingEmbedding(FilterBenchError):
    """A protocol references an (image, variant) key absent from the store."""


# -- metrics -----------------------------------------------------------------

class InsufficientData(FilterBenchError):
    """Too few scores for the requested statistic."""


class EmptyScores(FilterBenchError):
    """A score list is empty."""


# -- selection ---------------------------------------------------------------

class NoEligibleBin(FilterBenchError):
    """Every bin holds at most one filter, so no quota can be formed."""


# -- training ----------------------------------------------------------------

class MissingClass(ValidationError):
    """A class label has no training samples."""


class DivergenceDetected(FilterBenchError):
    """Training produced a non-finite loss."""


class SingularSystem(FilterBenchError):
    """Normal equations are rank deficient beyond the ridge tolerance."""


class MissingMap(FilterBenchError):
    """No restoration map is registered for a predicted filter class."""
