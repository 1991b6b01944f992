"""Exception types shared across the engine."""


class ExitNasError(Exception):
    """Base class for engine errors."""


class InvalidConfigurationError(ExitNasError):
    """A search-space or engine configuration value is unusable."""


class ContractViolation(ExitNasError):
    """An operation was called with inputs outside its contract."""


class GenomeValidationError(ExitNasError):
    """A genome failed validation where a valid genome is required."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid genome: " + "; ".join(self.violations))


class GenomeDecodeError(ExitNasError):
    """A flat gene vector could not be decoded."""


class MalformedTraceError(ExitNasError):
    """An evaluation trace violated the trace file contract."""


class EvaluatorUnavailableError(ExitNasError):
    """The evaluator process could not produce a result."""


class InsufficientDataError(ExitNasError):
    """Not enough archive entries to fit a model."""


class ModelStateError(ExitNasError):
    """A surrogate was used before it was fitted."""


class CheckpointError(ExitNasError):
    """A checkpoint is unreadable or incompatible with the config."""


class ConfigError(ExitNasError):
    """Engine configuration failed to parse or validate.

    Carries one message per offending field so the CLI can print
    field-level diagnostics.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
