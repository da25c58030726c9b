#!/usr/bin/env python3
"""
OpenMic Agents
==============
Role table, prompt assembly and schema-validated invocation for every LLM
role in the pipeline.

Each role reads declared blackboard fields, gets one system prompt loaded
from ``prompts/<role_id>.txt`` and must answer with a JSON document that
validates against ``schemas/<schema_id>.json``. A failing answer gets exactly
one repair round-trip before SchemaViolation.

Example:
    crew = AgentCrew.from_config(config, gateway)
    out = crew.invoke(RoleId.AUDIENCE_ANALYZER, board)
    board = crew.apply(RoleId.AUDIENCE_ANALYZER, board, board_updates(RoleId.AUDIENCE_ANALYZER, out.data, board))
"""

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import structlog
from jsonschema import Draft7Validator
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from blackboard import FIELDS, AuditLog, Blackboard, DraftScript, Material, QualityReport, write_field
from config import EndpointConfig, RunConfig, resolve_resource
from errors import ConfigError, InvariantViolation, MissingField, OpenMicError, SchemaViolation
from llm_gateway import ChatMessage, ChatRequest, Gateway


logger = structlog.get_logger(__name__)

MAX_ATTEMPTS = 2
SECRET_FIELDS: Tuple[str, ...] = ("raw_candidates", "scored", "released_materials")


class RoleId(str, Enum):
    AUDIENCE_ANALYZER = "AudienceAnalyzer"
    COMEDY_DIRECTOR = "ComedyDirector"
    JOKE_WRITER = "JokeWriter"
    PERFORMANCE_COACH = "PerformanceCoach"
    QUALITY_CONTROLLER = "QualityController"
    CANDIDATE_SCORER = "CandidateScorer"
    PUNCHLINE_SELECTOR = "PunchlineSelector"
    JUDGE = "Judge"
    CROSSTALK_CONVERTER = "CrosstalkConverter"


@dataclass(frozen=True)
class RoleSpec:
    """One agent: what it reads, what it may write, and how it must answer."""
    role_id: RoleId
    system_prompt: str
    reads: Tuple[str, ...]
    writes: Tuple[str, ...]
    output_schema_id: str
    temperature: float
    optional_reads: Tuple[str, ...] = ()
    max_tokens: int = 4096

    def __post_init__(self):
        allowed = set(FIELDS) | set(SECRET_FIELDS)
        stray = [f for f in self.writes if f not in allowed]
        if stray:
            raise ConfigError(f"{self.role_id.value} writes undeclared fields: {stray}")


# (reads, optional_reads, writes, schema)
ROLE_TABLE: Dict[RoleId, Tuple[Tuple[str, ...], Tuple[str, ...], Tuple[str, ...], str]] = {
    RoleId.AUDIENCE_ANALYZER: (("topic",), (), ("audience_profile",), "audience_profile"),
    RoleId.COMEDY_DIRECTOR: (("topic", "audience_profile"), (),
                             ("topic_expansion", "outline", "retrieval_keywords"), "comedy_plan"),
    RoleId.JOKE_WRITER: (("topic", "audience_profile", "outline", "materials"), ("topic_expansion",),
                         ("draft_script",), "draft_script"),
    RoleId.PERFORMANCE_COACH: (("audience_profile", "draft_script"), (), ("performance_script",),
                               "performance_script"),
    RoleId.QUALITY_CONTROLLER: (("topic", "audience_profile", "outline", "materials", "draft_script",
                                 "performance_script"), (), ("quality_reports",), "quality_report"),
    RoleId.CANDIDATE_SCORER: (("topic",), (), ("scored",), "candidate_scores"),
    RoleId.PUNCHLINE_SELECTOR: (("topic",), (), ("released_materials",), "materials"),
    RoleId.JUDGE: ((), (), (), "judge_scores"),
    RoleId.CROSSTALK_CONVERTER: ((), (), (), "converted_joke"),
}


# ============================================================================
# SCHEMAS AND TEMPLATES
# ============================================================================

class SchemaRegistry:
    """JSON Schema (draft-07) documents keyed by schema id."""

    def __init__(self, schemas: Optional[Dict[str, Dict[str, Any]]] = None):
        self._validators: Dict[str, Draft7Validator] = {}
        for schema_id, schema in (schemas or {}).items():
            self.register(schema_id, schema)

    @classmethod
    def load(cls, schema_dir) -> "SchemaRegistry":
        directory = Path(schema_dir)
        if not directory.is_dir():
            raise ConfigError(f"schema directory not found: {directory}")
        registry = cls()
        for path in sorted(directory.glob("*.json")):
            try:
                with open(path, "r", encoding="utf-8") as f:
                    registry.register(path.stem, json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})")
        return registry

    def register(self, schema_id: str, schema: Dict[str, Any]) -> None:
        Draft7Validator.check_schema(schema)
        self._validators[schema_id] = Draft7Validator(schema)

    def __contains__(self, schema_id: str) -> bool:
        return schema_id in self._validators

    def validate(self, schema_id: str, data: Any) -> List[str]:
        """Error messages, empty when ``data`` conforms."""
        if schema_id not in self._validators:
            raise ConfigError(f"schema not registered: {schema_id!r}")
        errors = sorted(self._validators[schema_id].iter_errors(data), key=lambda e: list(e.absolute_path))
        return [f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]


_PLACEHOLDER_RE = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


def render_template(template: str, variables: Dict[str, Any]) -> str:
    """Substitute ``{{name}}`` placeholders; an unknown name is a ConfigError."""
    def substitute(match):
        name = match.group(1)
        if name not in variables:
            raise ConfigError(f"prompt template uses unknown placeholder {{{{{name}}}}}")
        return str(variables[name])
    return _PLACEHOLDER_RE.sub(substitute, template)


def template_variables(config: RunConfig) -> Dict[str, Any]:
    lo, hi = config.outline_bits
    return {
        "min_chars": config.length_bounds.min_chars,
        "max_chars": config.length_bounds.max_chars,
        "chars_per_minute": config.chars_per_minute,
        "bits_min": lo,
        "bits_max": hi,
        "k2": config.k2,
        "tau": config.tau,
    }


def load_roles(config: RunConfig) -> Dict[RoleId, RoleSpec]:
    """Build every RoleSpec from the role table and the prompt directory."""
    prompt_dir = resolve_resource(config.prompt_dir)
    variables = template_variables(config)
    roles: Dict[RoleId, RoleSpec] = {}
    for role_id, (reads, optional_reads, writes, schema_id) in ROLE_TABLE.items():
        path = prompt_dir / f"{role_id.value}.txt"
        if not path.exists():
            raise ConfigError(f"prompt template missing: {path}")
        roles[role_id] = RoleSpec(
            role_id=role_id,
            system_prompt=render_template(path.read_text(encoding="utf-8"), variables).strip(),
            reads=reads,
            optional_reads=optional_reads,
            writes=writes,
            output_schema_id=schema_id,
            temperature=config.temperature_for(role_id.value),
            max_tokens=config.max_tokens,
        )
    return roles


# ============================================================================
# PROMPTS
# ============================================================================

class WriterContext(BaseModel):
    """Feedback carried from round r-1 into the round-r writer prompt."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    prev_script: Optional[DraftScript] = None
    prev_materials: List[Material] = Field(default_factory=list)
    directives: List[str] = Field(default_factory=list)
    prev_q_rag: bool = True
    preserved_ids: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _preserved_known(self):
        known = set()
        for m in self.prev_materials:
            known.add(m.id)
            known.update(m.source_joke_ids)
        stray = [i for i in self.preserved_ids if i not in known]
        if stray:
            raise ValueError(f"preserved ids not among previous materials: {stray}")
        return self

    def is_kept(self, material: Material) -> bool:
        preserved = set(self.preserved_ids)
        return material.id in preserved or bool(preserved.intersection(material.source_joke_ids))

    def prompt_sections(self) -> Dict[str, Any]:
        return {
            "previous_script": self.prev_script.full_text if self.prev_script else None,
            "previous_materials": [
                dict(m.model_dump(mode="json"), keep=self.is_kept(m)) for m in self.prev_materials
            ],
            "rewrite_directives": list(self.directives),
            "previous_retrieval_passed": self.prev_q_rag,
            "preserved_joke_ids": list(self.preserved_ids),
        }


def _serialize(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, BaseModel):
        value = value.model_dump(mode="json", exclude_none=True)
    elif isinstance(value, (list, tuple)):
        value = [v.model_dump(mode="json", exclude_none=True) if isinstance(v, BaseModel) else v for v in value]
    return json.dumps(value, ensure_ascii=False, indent=2, sort_keys=True)


def _section(label: str, value: Any) -> str:
    return f"# {label}\n{_serialize(value)}"


def build_prompt(role: RoleSpec, board: Blackboard, extra: Optional[WriterContext] = None,
                 sections: Optional[Sequence[Tuple[str, Any]]] = None) -> List[ChatMessage]:
    """
    System prompt plus one user message of labeled sections.

    Read fields come first in role order, then the writer context (JokeWriter
    only), then any caller ``sections``. Serialization is sorted and stable so
    the same board always yields the same bytes.

    Raises:
        MissingField: a required read field is unset
    """
    parts: List[str] = []
    for name in role.reads:
        value = getattr(board, name)
        if value is None or (isinstance(value, str) and not value.strip()):
            raise MissingField(name, role.role_id.value)
        parts.append(_section(name, value))
    for name in role.optional_reads:
        value = getattr(board, name)
        if value is not None:
            parts.append(_section(name, value))
    if extra is not None and role.role_id == RoleId.JOKE_WRITER:
        for label, value in extra.prompt_sections().items():
            if value is not None:
                parts.append(_section(label, value))
    for label, value in sections or ():
        parts.append(_section(label, value))

    return [
        ChatMessage(role="system", content=role.system_prompt),
        ChatMessage(role="user", content="\n\n".join(parts) if parts else "# input\n{}"),
    ]


# ============================================================================
# INVOCATION
# ============================================================================

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def extract_json(raw: str) -> Any:
    """Pull the JSON document out of a model answer (fenced or bare)."""
    text = raw.strip()
    fenced = _FENCE_RE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    start, end = text.find("{"), text.rfind("}")
    if start != -1 and end > start:
        try:
            return json.loads(text[start:end + 1])
        except json.JSONDecodeError as e:
            raise ValueError(f"output is not a JSON document: {e}")
    raise ValueError("output is not a JSON document")


@dataclass
class ValidatedOutput:
    role_id: RoleId
    data: Any
    raw_outputs: List[str] = field(default_factory=list)
    repair_count: int = 0


CheckFn = Callable[[Any], None]


def _problems(role: RoleSpec, schemas: SchemaRegistry, raw: str, check: Optional[CheckFn]) -> Tuple[Any, List[str]]:
    try:
        data = extract_json(raw)
    except ValueError as e:
        return None, [str(e)]
    errors = schemas.validate(role.output_schema_id, data)
    if errors or check is None:
        return data, errors
    try:
        check(data)
    except SchemaViolation as e:
        return data, e.errors
    except (OpenMicError, ValueError, ValidationError) as e:
        return data, [str(e)]
    return data, []


def _repair_message(errors: Sequence[str]) -> ChatMessage:
    listing = "\n".join(f"- {e}" for e in errors)
    return ChatMessage(role="user", content=(
        "Your previous answer was rejected:\n"
        f"{listing}\n"
        "Reply again with a single corrected JSON document only."
    ))


def invoke_role(role: RoleSpec, gateway: Gateway, board: Blackboard, extra: Optional[WriterContext] = None, *,
                schemas: SchemaRegistry, endpoint: EndpointConfig,
                sections: Optional[Sequence[Tuple[str, Any]]] = None,
                check: Optional[CheckFn] = None, ordinal: Optional[int] = None) -> ValidatedOutput:
    """
    Call the backend for ``role`` and validate the answer.

    ``check`` runs after schema validation and may raise to reject a
    structurally valid answer; its message joins the repair prompt.

    Raises:
        SchemaViolation: both attempts failed; carries every raw output
        GatewayError: propagated from the gateway
    """
    messages = build_prompt(role, board, extra, sections)
    raw_outputs: List[str] = []
    errors: List[str] = []
    for attempt in range(1, MAX_ATTEMPTS + 1):
        request = ChatRequest(
            model=endpoint.model,
            messages=messages,
            temperature=role.temperature,
            max_tokens=role.max_tokens,
            response_schema_id=role.output_schema_id,
            role_tag=role.role_id.value,
        )
        response = gateway.chat(endpoint, request, ordinal=ordinal if attempt == 1 else None)
        raw_outputs.append(response.content)
        data, errors = _problems(role, schemas, response.content, check)
        if not errors:
            logger.info("role_invoked", role=role.role_id.value, attempts=attempt)
            return ValidatedOutput(role.role_id, data, raw_outputs, repair_count=attempt - 1)
        logger.warning("role_output_rejected", role=role.role_id.value, attempt=attempt, errors=errors[:3])
        messages = messages + [ChatMessage(role="assistant", content=response.content), _repair_message(errors)]
    raise SchemaViolation(role.role_id.value, errors, raw_outputs)


# ============================================================================
# QUALITY REPORTS
# ============================================================================

_CHECKS = ("check_struct", "check_safe", "check_length")


def parse_quality_report(raw: Any, round_no: int = 1) -> QualityReport:
    """
    QualityController answer (text or decoded document) -> QualityReport.

    The recorded q_writer is the conjunction of the three checks; every value
    the controller reported is kept in ``agent_checks``.

    Raises:
        SchemaViolation: not JSON, missing verdicts, or an incomplete payload
    """
    role = RoleId.QUALITY_CONTROLLER.value
    raw_text = raw if isinstance(raw, str) else json.dumps(raw, ensure_ascii=False)
    if isinstance(raw, str):
        try:
            data = extract_json(raw)
        except ValueError as e:
            raise SchemaViolation(role, [str(e)], [raw_text])
    else:
        data = raw
    if not isinstance(data, dict):
        raise SchemaViolation(role, ["report must be a JSON object"], [raw_text])

    errors = [f"{key} must be a boolean" for key in ("q_rag", "q_writer") + _CHECKS
              if not isinstance(data.get(key), bool)]
    if errors:
        raise SchemaViolation(role, errors, [raw_text])
    if not data["q_rag"]:
        if not data.get("refined_keywords"):
            errors.append("q_rag=false requires non-empty refined_keywords")
        if "exclusions" not in data:
            errors.append("q_rag=false requires exclusions")
    q_writer = data["check_struct"] and data["check_safe"] and data["check_length"]
    if not (data["q_writer"] and q_writer) and not data.get("directives"):
        errors.append("a failed writer check requires non-empty directives")
    if errors:
        raise SchemaViolation(role, errors, [raw_text])

    agent_checks = {key: data[key] for key in ("q_writer",) + _CHECKS}
    if q_writer != data["q_writer"]:
        logger.warning("q_writer_recomputed", reported=data["q_writer"], recorded=q_writer)
    try:
        return QualityReport(
            round=round_no,
            q_rag=data["q_rag"],
            q_writer=q_writer,
            check_struct=data["check_struct"],
            check_safe=data["check_safe"],
            check_length=data["check_length"],
            refined_keywords=[k for k in data.get("refined_keywords", []) if k.strip()],
            exclusions=list(data.get("exclusions", [])),
            per_joke_feedback=dict(data.get("per_joke_feedback", {})),
            directives=list(data.get("directives", [])),
            preserved_ids=list(data.get("preserved_ids", [])),
            agent_checks=agent_checks,
        )
    except ValidationError as e:
        raise SchemaViolation(role, [err["msg"] for err in e.errors()], [raw_text])


# ============================================================================
# BLACKBOARD UPDATES
# ============================================================================

def board_updates(role_id: RoleId, data: Dict[str, Any], board: Blackboard) -> Dict[str, Any]:
    """Map a validated answer of a board-writing role to field values."""
    if role_id == RoleId.AUDIENCE_ANALYZER:
        return {"audience_profile": data}
    if role_id == RoleId.COMEDY_DIRECTOR:
        keywords = [k for k in data.get("retrieval_keywords", []) if k.strip()] or [board.topic]
        return {
            "topic_expansion": data["topic_expansion"],
            "outline": data["outline"],
            "retrieval_keywords": keywords,
        }
    if role_id == RoleId.JOKE_WRITER:
        return {"draft_script": DraftScript(sections=data["sections"])}
    if role_id == RoleId.PERFORMANCE_COACH:
        return {"performance_script": data["markup"]}
    raise ValueError(f"{role_id.value} answers are not applied through board_updates")


def apply_output(role: RoleSpec, board: Blackboard, updates: Dict[str, Any], *, audit: Optional[AuditLog] = None,
                 round_no: Optional[int] = None, outline_bits: Tuple[int, int] = (2, 3)) -> Blackboard:
    """Write ``updates`` under ``role``'s name; any field outside role.writes is refused."""
    for name in updates:
        if name not in role.writes:
            raise InvariantViolation(name, f"{role.role_id.value} may not write this field")
    for name, value in updates.items():
        board = write_field(board, name, value, writer=role.role_id.value, audit=audit,
                            round_no=round_no, outline_bits=outline_bits)
    return board


class AgentCrew:
    """Roles, schemas and the gateway bundled for one run."""

    def __init__(self, roles: Dict[RoleId, RoleSpec], schemas: SchemaRegistry, config: RunConfig,
                 gateway: Gateway):
        self.roles = roles
        self.schemas = schemas
        self.config = config
        self.gateway = gateway
        missing = [r.output_schema_id for r in roles.values() if r.output_schema_id not in schemas]
        if missing:
            raise ConfigError(f"schemas not registered: {sorted(set(missing))}")

    @classmethod
    def from_config(cls, config: RunConfig, gateway: Gateway) -> "AgentCrew":
        return cls(load_roles(config), SchemaRegistry.load(resolve_resource(config.schema_dir)), config, gateway)

    def endpoint(self, role_id: RoleId) -> EndpointConfig:
        return self.config.endpoint_for(role_id.value)

    def invoke(self, role_id: RoleId, board: Blackboard, extra: Optional[WriterContext] = None, *,
               sections: Optional[Sequence[Tuple[str, Any]]] = None, check: Optional[CheckFn] = None,
               ordinal: Optional[int] = None) -> ValidatedOutput:
        return invoke_role(self.roles[role_id], self.gateway, board, extra, schemas=self.schemas,
                           endpoint=self.endpoint(role_id), sections=sections, check=check, ordinal=ordinal)

    def apply(self, role_id: RoleId, board: Blackboard, updates: Dict[str, Any], *,
              audit: Optional[AuditLog] = None, round_no: Optional[int] = None) -> Blackboard:
        return apply_output(self.roles[role_id], board, updates, audit=audit, round_no=round_no,
                            outline_bits=self.config.outline_bits)

    def board_check(self, role_id: RoleId, board: Blackboard) -> CheckFn:
        """Reject answers whose board updates would break a field invariant."""
        def check(data):
            self.apply(role_id, board, board_updates(role_id, data, board))
        return check
