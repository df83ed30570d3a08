"""Exception hierarchy shared across the engine.

Every error carries a stable machine ``code`` (its class name) so tool
dispatch and the CLI can surface failures without string matching.
"""

from __future__ import annotations


class FraudDeskError(Exception):
    """Base class for all engine errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- datastore ---------------------------------------------------------------

class EmptyDataset(FraudDeskError):
    pass


class SchemaMismatch(FraudDeskError):
    pass


class DuplicateTransNum(FraudDeskError):
    pass


class CoercionFailure(FraudDeskError):
    def __init__(self, message: str, row_index: int | None = None):
        super().__init__(message)
        self.row_index = row_index


class UnknownColumn(FraudDeskError):
    pass


class TypeMismatch(FraudDeskError):
    pass


class SchemaFileError(FraudDeskError):
    pass


# --- llm gateway --------------------------------------------------------------

class BackendUnavailable(FraudDeskError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class TranscriptExhausted(FraudDeskError):
    pass


class TranscriptDivergence(FraudDeskError):
    def __init__(self, expected_digest: str, actual_digest: str, index: int):
        super().__init__(
            f"transcript entry {index}: stored digest {expected_digest} "
            f"does not match live request digest {actual_digest}"
        )
        self.expected_digest = expected_digest
        self.actual_digest = actual_digest
        self.index = index


class AuthMissing(FraudDeskError):
    pass


class VocabularyLoadFailure(FraudDeskError):
    pass


class IoFailure(FraudDeskError):
    pass


# --- orchestrator -------------------------------------------------------------

class EmptyTransNum(FraudDeskError):
    pass


class InvestigationNotRunning(FraudDeskError):
    pass


class MalformedStep(FraudDeskError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class AlertInvalid(FraudDeskError):
    pass


# --- tools --------------------------------------------------------------------

class CoordinateOutOfRange(FraudDeskError):
    pass


class SingleChartViolation(FraudDeskError):
    pass


class EmptySeries(FraudDeskError):
    pass


class NoChartAvailable(FraudDeskError):
    pass


class ToolUnknown(FraudDeskError):
    pass


class ToolUnavailable(FraudDeskError):
    pass


class BadToolArguments(FraudDeskError):
    pass


class NotFound(FraudDeskError):
    """Lookup miss. A signal for tool feedback, not an engine failure."""


# --- agents -------------------------------------------------------------------

class MissingArtifact(FraudDeskError):
    pass


class ReportParseError(FraudDeskError):
    pass


class EmptyInvestigation(FraudDeskError):
    pass


class FilterHallucination(FraudDeskError):
    pass


class EmptySelection(FraudDeskError):
    pass


class VerdictParseError(FraudDeskError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


# --- evaluation ----------------------------------------------------------------

class RatingParseError(FraudDeskError):
    pass


class IncompleteEvaluation(FraudDeskError):
    pass


class EmptyRatings(FraudDeskError):
    pass


class LabelParseError(FraudDeskError):
    pass


class UnknownStepIndex(FraudDeskError):
    pass


class LabelCoverageMismatch(FraudDeskError):
    pass


class LengthMismatch(FraudDeskError):
    pass


class InsufficientRows(FraudDeskError):
    pass
