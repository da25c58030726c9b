#!/usr/bin/env python3
"""
OpenMic Errors
==============
Exception hierarchy shared by every OpenMic module.

Each class carries the exit code the ``openmic`` command line returns when the
error escapes a subcommand.
"""

from typing import List, Optional, Sequence


class OpenMicError(Exception):
    """Base class for all OpenMic failures."""
    exit_code = 1


# ============================================================================
# CONFIGURATION
# ============================================================================

class ConfigError(OpenMicError):
    """Invalid configuration file or override."""
    exit_code = 1


# ============================================================================
# BLACKBOARD
# ============================================================================

class BlackboardError(OpenMicError):
    exit_code = 1


class UnknownField(BlackboardError):
    """Write or read of a field the Blackboard does not declare."""

    def __init__(self, field: str):
        super().__init__(f"Unknown blackboard field: {field!r}")
        self.field = field


class InvariantViolation(BlackboardError):
    """A value fails the invariants of the field it is written to."""

    def __init__(self, field: str, reason: str):
        super().__init__(f"Invariant violated for {field!r}: {reason}")
        self.field = field
        self.reason = reason


class MissingField(BlackboardError):
    """A role reads a field that has not been written yet."""

    def __init__(self, field: str, role: Optional[str] = None):
        owner = f" (needed by {role})" if role else ""
        super().__init__(f"Blackboard field {field!r} is unset{owner}")
        self.field = field
        self.role = role


# ============================================================================
# GATEWAY
# ============================================================================

class GatewayError(OpenMicError):
    """A backend call failed for good (retries exhausted or non-retryable)."""
    exit_code = 3

    def __init__(self, message: str, attempts: int = 1, status: Optional[int] = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class TransientError(GatewayError):
    """Retryable transport failure (HTTP 429/5xx, timeout, connection reset)."""


class ProtocolError(GatewayError):
    """The backend answered with a body that is not a valid wire response."""


class TranscriptExhausted(GatewayError):
    """The mock backend has no scripted entry for this invocation."""

    def __init__(self, role: str, ordinal: int, kind: str = "chat"):
        super().__init__(f"No scripted {kind} entry for role={role!r} ordinal={ordinal}")
        self.role = role
        self.ordinal = ordinal


class DimensionMismatch(OpenMicError):
    """Vectors (or an index and a query) disagree on dimension."""
    exit_code = 3


class ZeroVector(OpenMicError):
    """Cosine similarity is undefined for an all-zero vector."""
    exit_code = 3


# ============================================================================
# AGENTS
# ============================================================================

class SchemaViolation(OpenMicError):
    """Agent output failed its registered schema, repair included."""
    exit_code = 4

    def __init__(self, role: str, errors: Sequence[str], raw_outputs: Sequence[str] = ()):
        summary = "; ".join(errors[:3]) if errors else "invalid output"
        super().__init__(f"{role}: schema violation: {summary}")
        self.role = role
        self.errors: List[str] = list(errors)
        self.raw_outputs: List[str] = list(raw_outputs)


# ============================================================================
# CORPUS / RAG
# ============================================================================

class CorpusError(OpenMicError):
    exit_code = 2


class DuplicateId(CorpusError):
    def __init__(self, joke_id: str, line_no: int):
        super().__init__(f"line {line_no}: duplicate joke id {joke_id!r}")
        self.joke_id = joke_id
        self.line_no = line_no


class MalformedLine(CorpusError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class AnonymizationFailure(OpenMicError):
    """A roster name survived both the replacement pass and the LLM rewrite."""
    exit_code = 5

    def __init__(self, record_id: str, names: Sequence[str]):
        super().__init__(f"record {record_id!r} still names: {', '.join(names)}")
        self.record_id = record_id
        self.names = list(names)


# ============================================================================
# ORCHESTRATOR
# ============================================================================

class MissingHistory(OpenMicError):
    """No snapshot of round r-1 exists to build the writer context from."""

    def __init__(self, round_no: int):
        super().__init__(f"no history before round {round_no}")
        self.round_no = round_no


# ============================================================================
# MARKUP
# ============================================================================

class MarkupError(OpenMicError):
    """Parse error in the performance DSL, located by line and column."""
    exit_code = 2

    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"{type(self).__name__} at line {line}, column {column}: {message}")
        self.detail = message
        self.line = line
        self.column = column


class UnclosedSpan(MarkupError):
    pass


class UnknownMarker(MarkupError):
    pass


class MalformedDuration(MarkupError):
    pass


class NestingViolation(MarkupError):
    pass


class EmptySpan(MarkupError):
    pass


class EmptyScript(OpenMicError):
    """Nothing to put on a timeline."""
    exit_code = 2


# ============================================================================
# JUDGE
# ============================================================================

class WeightSumError(OpenMicError):
    exit_code = 1

    def __init__(self, total: float, reason: str = ""):
        super().__init__(reason or f"judge weights sum to {total!r}, expected 1")
        self.total = total
