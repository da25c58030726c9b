#!/usr/bin/env python3
"""
OpenMic Blackboard
==================
Typed shared state that persists between agent turns and refinement rounds.

The board is an immutable value: ``write_field`` returns a new board with
exactly one field replaced and appends an audit record. Only the orchestrator
writes, between turns. Raw retrieval candidates never land here; they stay
on the rag module's SecretBlackboard.

Example:
    board = Blackboard()
    board = write_field(board, "topic", "减肥", writer="user")
    snap = snapshot(board, 0)
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, computed_field, field_validator, \
    model_validator

from errors import InvariantViolation, UnknownField
from markup import count_speakable


logger = structlog.get_logger(__name__)


class _Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ============================================================================
# FIELD TYPES
# ============================================================================

class AudienceProfile(_Record):
    persona: str = Field(min_length=1)
    preferences: List[str] = Field(default_factory=list)
    taboo_list: List[str] = Field(default_factory=list)
    register: str = ""

    @field_validator("persona")
    @classmethod
    def _persona_not_blank(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("persona must not be blank")
        return v

    @field_validator("taboo_list")
    @classmethod
    def _taboos_not_empty(cls, v: List[str]) -> List[str]:
        if any(not t.strip() for t in v):
            raise ValueError("taboo_list entries must be non-empty")
        return v


class TopicExpansion(_Record):
    subtopics: List[str] = Field(min_length=1)
    anecdote_angles: List[str] = Field(default_factory=list)
    candidate_premises: List[str] = Field(default_factory=list)


class Bit(_Record):
    premise: str
    intended_payoff: str


class CallbackPlan(_Record):
    source_bit_index: int = Field(ge=0)
    trigger_hint: str


class ComedyOutline(_Record):
    opening_hook: str
    bits: List[Bit] = Field(min_length=1)
    callback_plan: List[CallbackPlan] = Field(default_factory=list)
    closing_tag: str

    @model_validator(mode="after")
    def _callbacks_point_at_bits(self):
        for cb in self.callback_plan:
            if cb.source_bit_index >= len(self.bits):
                raise ValueError(f"callback source_bit_index {cb.source_bit_index} has no bit "
                                 f"(outline has {len(self.bits)})")
        return self


class ScriptSection(_Record):
    label: str
    body: str


class DraftScript(_Record):
    """Writer output. full_text and speakable_char_count are derived from sections."""
    sections: List[ScriptSection] = Field(default_factory=list)
    full_text: str = ""
    speakable_char_count: int = 0

    @model_validator(mode="before")
    @classmethod
    def _derive(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            sections = data.get("sections") or []
            bodies = [s.body if isinstance(s, ScriptSection) else s.get("body", "") for s in sections]
            data["full_text"] = "".join(bodies)
            data["speakable_char_count"] = count_speakable(data["full_text"])
        return data

    @classmethod
    def from_text(cls, text: str, label: str = "script") -> "DraftScript":
        return cls(sections=[ScriptSection(label=label, body=text)])

    def to_markdown(self) -> str:
        parts = []
        for section in self.sections:
            parts.append(f"## {section.label}\n\n{section.body.strip()}\n")
        return "\n".join(parts)


class Material(_Record):
    """Distilled writing material released from the retrieval pipeline."""
    id: str
    source_joke_ids: List[str] = Field(min_length=1)
    setup: str = ""
    punchline: str = ""
    usage_hint: str = ""

    @model_validator(mode="after")
    def _has_content(self):
        if not (self.setup.strip() or self.punchline.strip()):
            raise ValueError("material needs a setup or a punchline")
        return self


class QualityReport(_Record):
    """Dual-dimension verdict for one round plus its routing payload."""
    round: int = Field(ge=1)
    q_rag: bool
    q_writer: bool
    check_struct: bool
    check_safe: bool
    check_length: bool
    refined_keywords: List[str] = Field(default_factory=list)
    exclusions: List[str] = Field(default_factory=list)
    per_joke_feedback: Dict[str, str] = Field(default_factory=dict)
    directives: List[str] = Field(default_factory=list)
    preserved_ids: List[str] = Field(default_factory=list)
    agent_checks: Dict[str, bool] = Field(default_factory=dict)

    @field_validator("exclusions")
    @classmethod
    def _as_set(cls, v: List[str]) -> List[str]:
        return sorted(set(v))

    @model_validator(mode="after")
    def _conjunction(self):
        if self.q_writer != (self.check_struct and self.check_safe and self.check_length):
            raise ValueError("q_writer must equal check_struct and check_safe and check_length")
        if not self.q_rag and not self.refined_keywords:
            raise ValueError("a failed retrieval verdict needs refined_keywords")
        return self

    @property
    def passed(self) -> bool:
        return self.q_rag and self.q_writer


# ============================================================================
# BLACKBOARD
# ============================================================================

class Blackboard(BaseModel):
    model_config = ConfigDict(frozen=True, extra="ignore")

    topic: str = ""
    audience_profile: Optional[AudienceProfile] = None
    topic_expansion: Optional[TopicExpansion] = None
    outline: Optional[ComedyOutline] = None
    draft_script: Optional[DraftScript] = None
    performance_script: Optional[str] = None
    materials: List[Material] = Field(default_factory=list)
    quality_reports: List[QualityReport] = Field(default_factory=list)
    retrieval_keywords: List[str] = Field(default_factory=list)
    excluded_joke_ids: List[str] = Field(default_factory=list)

    @computed_field
    @property
    def round_counter(self) -> int:
        return len(self.quality_reports)


FIELDS: Tuple[str, ...] = tuple(Blackboard.model_fields)
_ADAPTERS: Dict[str, TypeAdapter] = {
    name: TypeAdapter(info.annotation) for name, info in Blackboard.model_fields.items()
}


@dataclass(frozen=True)
class WriteRecord:
    round: int
    writer: str
    field: str


class AuditLog:
    """Append-only record of every blackboard write in a run."""

    def __init__(self):
        self.records: List[WriteRecord] = []

    def append(self, record: WriteRecord) -> None:
        self.records.append(record)

    def fields_written(self, round_no: int) -> Set[str]:
        return {r.field for r in self.records if r.round == round_no}

    def writers_of(self, field_name: str) -> Set[str]:
        return {r.writer for r in self.records if r.field == field_name}


def _plain(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _check_field(board: Blackboard, field_name: str, value: Any, outline_bits: Tuple[int, int]) -> None:
    if field_name == "topic" and not value.strip():
        raise InvariantViolation(field_name, "topic must not be blank")
    if field_name == "outline" and value is not None:
        lo, hi = outline_bits
        if not lo <= len(value.bits) <= hi:
            raise InvariantViolation(field_name, f"outline has {len(value.bits)} bits, expected {lo}..{hi}")
    if field_name == "quality_reports":
        for i, report in enumerate(value, start=1):
            if report.round != i:
                raise InvariantViolation(field_name, f"report #{i} is tagged round {report.round}")
    if field_name == "excluded_joke_ids":
        dropped = set(board.excluded_joke_ids) - set(value)
        if dropped:
            raise InvariantViolation(field_name, f"exclusions may only grow; dropped {sorted(dropped)}")
    if field_name == "materials":
        ids = [m.id for m in value]
        if len(ids) != len(set(ids)):
            raise InvariantViolation(field_name, "material ids must be unique")


def write_field(board: Blackboard, field_name: str, value: Any, *, writer: str = "orchestrator",
                audit: Optional[AuditLog] = None, round_no: Optional[int] = None,
                outline_bits: Tuple[int, int] = (2, 3)) -> Blackboard:
    """
    Return a copy of ``board`` with one field replaced.

    Raises:
        UnknownField: field_name is not declared (round_counter is derived, not writable)
        InvariantViolation: value fails the field's type or invariants
    """
    if field_name not in FIELDS:
        raise UnknownField(field_name)
    try:
        validated = _ADAPTERS[field_name].validate_python(_plain(value))
    except ValidationError as e:
        reason = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or field_name}: {err['msg']}"
                           for err in e.errors())
        raise InvariantViolation(field_name, reason)
    _check_field(board, field_name, validated, outline_bits)

    updated = board.model_copy(update={field_name: validated})
    tag = round_no if round_no is not None else board.round_counter + 1
    if audit is not None:
        audit.append(WriteRecord(round=tag, writer=writer, field=field_name))
    logger.debug("blackboard_write", field=field_name, writer=writer, round=tag)
    return updated


def read_field(board: Blackboard, field_name: str) -> Any:
    if field_name not in FIELDS and field_name != "round_counter":
        raise UnknownField(field_name)
    return getattr(board, field_name)


def board_to_json(board: Blackboard) -> str:
    """One key per field, unset optionals absent, UTF-8 text."""
    return json.dumps(board.model_dump(mode="json", exclude_none=True), ensure_ascii=False, indent=2)


def board_from_json(text: str) -> Blackboard:
    return Blackboard.model_validate_json(text)


# ============================================================================
# SNAPSHOTS
# ============================================================================

@dataclass(frozen=True)
class SnapshotRecord:
    """Frozen serialized copy of the board at the end of a round."""
    round: int
    payload: bytes

    @property
    def board(self) -> Blackboard:
        return board_from_json(self.payload.decode("utf-8"))

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / "rounds" / f"round_{self.round}" / "blackboard.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "xb") as f:
            f.write(self.payload)
        return path


def snapshot(board: Blackboard, round_no: int) -> SnapshotRecord:
    if not 0 <= round_no <= board.round_counter:
        raise InvariantViolation("round_counter",
                                 f"cannot snapshot round {round_no} of a board at round {board.round_counter}")
    return SnapshotRecord(round=round_no, payload=board_to_json(board).encode("utf-8"))
