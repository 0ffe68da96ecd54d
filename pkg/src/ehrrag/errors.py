"""Exception hierarchy shared across the harness.

Per-record problems found during ingestion or parsing are not raised; they
are collected into report objects next to the data they describe. The
classes here cover the conditions that abort an operation outright.
"""

from __future__ import annotations


class EhrRagError(Exception):
    """Base class for all harness errors."""


class UnreadableFile(EhrRagError):
    """Input file missing or framing unparseable."""


class NoCutoffNote(EhrRagError):
    """Hospitalization lacks the anchor note required by the task."""


class ProviderUnavailable(EhrRagError):
    """Embedding provider not reachable or not configured."""


class DimensionMismatch(EhrRagError):
    """Provider returned vectors of inconsistent dimension."""


class EmptyIndex(EhrRagError):
    """Retrieval attempted against an index with no chunks."""


class BudgetTooSmall(EhrRagError):
    """Token budget cannot fit even the rendered template."""


class MissingNow(EhrRagError):
    """Antibiotics prompt rendered without a reference timestamp."""


class ProviderError(EhrRagError):
    """Chat provider failed after retries."""


class AuthError(ProviderError):
    """Provider rejected the configured credentials."""


class ContextLengthExceeded(ProviderError):
    """Prompt does not fit the configured model window.

    Surfaced distinctly so the runner can record the condition as a
    scored-zero cell instead of crashing the matrix.
    """


class SectionNotFound(EhrRagError):
    """Expected note section header absent."""


class ImpossibleDate(EhrRagError):
    """Month/day pair not a valid calendar date in any candidate year."""


class EmptyTable(EhrRagError):
    """Category table loaded zero usable rows."""


class InvalidCode(EhrRagError):
    """Diagnosis code fails the syntactic pattern."""


class InsufficientPoints(EhrRagError):
    """Curve construction or comparison needs at least two points."""


class ZeroBaselineArea(EhrRagError):
    """Normalized area difference undefined for a zero baseline area."""


class ConfigInvalid(EhrRagError):
    """Experiment configuration failed validation.

    Carries every violation found, not just the first.
    """

    def __init__(self, violations: list[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
