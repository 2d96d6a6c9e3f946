"""Exception types shared across the package.

Each error class maps to one failure category a caller may want to handle
separately: malformed bytes vs. missing bytes vs. bad inputs.
"""


class AttnSegError(Exception):
    """Base class for all package errors."""


class FormatError(AttnSegError):
    """Malformed container bytes, manifest text, or mask file; includes
    row-stochasticity violations."""


class ContainerIOError(AttnSegError):
    """A declared blob is missing or shorter than its descriptor claims."""


class ManifestError(AttnSegError):
    """Manifest-level invariant violated (token spans, class ids, duplicates)."""


class VocabularyError(AttnSegError):
    """Unknown class id or name."""


class PlanningError(AttnSegError):
    """Prompt limiting or dataset planning cannot proceed."""


class AggregationError(AttnSegError):
    """No attention records match a (kind, scale, timestep) selection."""


class ConfigError(AttnSegError):
    """Invalid hyperparameter combination or config file."""


class ContractError(AttnSegError):
    """A documented precondition was violated by the caller."""


class NumericError(AttnSegError):
    """Non-finite values where finite numbers are required."""


class EvalError(AttnSegError):
    """Evaluation is undefined for the given inputs (e.g. no class has a
    non-empty union)."""
