"""Exception types shared across the package."""


class HfnnError(Exception):
    """Base class for all library errors."""


class ConfigurationError(HfnnError, ValueError):
    """Invalid or incomplete configuration (missing inputs, bad specs, empty strata)."""


class UsageError(HfnnError, ValueError):
    """An API was called in a state or with arguments it does not support."""


class DomainError(HfnnError, ValueError):
    """A point lies outside the region where a profile or oracle is defined."""


class ValidationError(HfnnError, ValueError):
    """Data failed an invariant check. ``problems`` lists every violation found."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class DegenerateScenarioError(HfnnError, ValueError):
    """A data-scenario extraction selected no points."""


class DivergenceError(HfnnError, RuntimeError):
    """Training produced non-finite values or exploded."""

    def __init__(self, message, iteration=None, term_norms=None):
        super().__init__(message)
        self.iteration = iteration
        self.term_norms = dict(term_norms or {})
