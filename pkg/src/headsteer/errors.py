"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs (the CLI maps them to exit
code 2); everything else derived from ``HeadSteerError`` is a runtime failure.
"""


class HeadSteerError(Exception):
    pass


class ValidationError(HeadSteerError, ValueError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class ZeroNorm(ValidationError):
    pass


class RankDeficient(HeadSteerError):
    """Raised only when the caller disables the ridge fallback."""


class TokenOutOfRange(ValidationError):
    pass


class NonFiniteLoss(HeadSteerError):
    pass


class InvalidHead(ValidationError):
    pass


class OffsetDimMismatch(ValidationError):
    pass


class ContextOverflow(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class DegenerateConfig(ValidationError):
    pass


class UndefinedConditional(HeadSteerError):
    pass


class InsufficientSamples(ValidationError):
    pass


class NonConvergence(HeadSteerError):
    pass


class MissingHeadData(ValidationError):
    pass


class KTooLarge(ValidationError):
    pass


class NoPairs(ValidationError):
    pass


class EmptyStore(ValidationError):
    pass


class IndexTooSmall(ValidationError):
    pass


class ConfigMismatch(ValidationError):
    pass


class NoSelectedHeads(ValidationError):
    pass


class NonFiniteObjective(HeadSteerError):
    pass


class FormatError(ValidationError):
    """Bad magic, version, or hash in a persisted file."""


class StageOrderError(ValidationError):
    pass


class PipelineError(HeadSteerError):
    """Wraps an error raised inside a pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
