#!/usr/bin/env python3
"""
OpenMic Orchestrator
====================
Drives one generation run: the ordered agent turns, the quality gate after
every round, routing of the next round, and the run directory.

Round 1:
    AudienceAnalyzer -> ComedyDirector -> rag -> JokeWriter -> PerformanceCoach -> QualityController

Later rounds re-enter where the previous verdict points:

    (q_rag, q_writer) = (1, 1)  Terminate
                        (0, 1)  ReRetrieve  rag -> JokeWriter -> ...
                        (1, 0)  Rewrite     JokeWriter -> ...
                        (0, 0)  Both        rag -> JokeWriter -> ...

The loop stops on PASS or after r_max rounds; an exhausted run still writes
its latest draft as best-effort output.

Run directory:
    runs/<run-id>/config.json
    runs/<run-id>/rounds/round_<r>/{blackboard.json, secret_blackboard.json,
                                    quality_report.json, draft.md, markup.txt}
    runs/<run-id>/final/{script.md, markup.txt, timeline.json, judge_report.json, result.json}
"""

import json
import random
import secrets
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import structlog
from pydantic import BaseModel, ConfigDict, model_validator

from agents import AgentCrew, RoleId, WriterContext, board_updates, parse_quality_report
from blackboard import (
    AudienceProfile,
    AuditLog,
    Blackboard,
    DraftScript,
    QualityReport,
    SnapshotRecord,
    board_from_json,
    snapshot,
    write_field,
)
from config import RunConfig, dump_config
from errors import MissingField, MissingHistory
from judge import JudgeReport, evaluate
from llm_gateway import Gateway
from markup import DEFAULT_PAUSE_MS, AnnotatedScript, compile_timeline, parse_markup, strip_plain, timeline_to_json
from rag import Corpus, EmbeddingIndex, RagParams, run_rag


logger = structlog.get_logger(__name__)

RAG_TURN = "rag"


# ============================================================================
# SCHEDULING
# ============================================================================

class Phase(Enum):
    AUDIENCE = RoleId.AUDIENCE_ANALYZER.value
    DIRECTION = RoleId.COMEDY_DIRECTOR.value
    RETRIEVAL = RAG_TURN
    WRITING = RoleId.JOKE_WRITER.value
    COACHING = RoleId.PERFORMANCE_COACH.value
    QUALITY = RoleId.QUALITY_CONTROLLER.value


FIRST_ROUND = (Phase.AUDIENCE, Phase.DIRECTION, Phase.RETRIEVAL, Phase.WRITING, Phase.COACHING, Phase.QUALITY)


def schedule_turn(phase: Phase) -> str:
    """Role id (or ``"rag"``) that speaks in ``phase``."""
    return phase.value


class RoutingKind(str, Enum):
    TERMINATE = "Terminate"
    RE_RETRIEVE = "ReRetrieve"
    REWRITE = "Rewrite"
    BOTH = "Both"


class RoutingAction(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: RoutingKind
    keywords: Optional[List[str]] = None
    exclusions: Optional[List[str]] = None
    directives: Optional[List[str]] = None

    @model_validator(mode="after")
    def _payload(self):
        if self.kind in (RoutingKind.RE_RETRIEVE, RoutingKind.BOTH):
            if not self.keywords or self.exclusions is None:
                raise ValueError(f"{self.kind.value} needs keywords and exclusions")
        if self.kind in (RoutingKind.REWRITE, RoutingKind.BOTH) and not self.directives:
            raise ValueError(f"{self.kind.value} needs directives")
        return self

    def phases(self) -> List[Phase]:
        if self.kind == RoutingKind.TERMINATE:
            return []
        if self.kind == RoutingKind.REWRITE:
            return [Phase.WRITING, Phase.COACHING, Phase.QUALITY]
        return [Phase.RETRIEVAL, Phase.WRITING, Phase.COACHING, Phase.QUALITY]


def route(q_rag: bool, q_writer: bool, report: QualityReport) -> RoutingAction:
    if q_rag and q_writer:
        return RoutingAction(kind=RoutingKind.TERMINATE)
    if not q_rag and q_writer:
        return RoutingAction(kind=RoutingKind.RE_RETRIEVE, keywords=list(report.refined_keywords),
                             exclusions=list(report.exclusions))
    if q_rag and not q_writer:
        return RoutingAction(kind=RoutingKind.REWRITE, directives=list(report.directives))
    return RoutingAction(kind=RoutingKind.BOTH, keywords=list(report.refined_keywords),
                         exclusions=list(report.exclusions), directives=list(report.directives))


def phases_for_round(round_no: int, previous: Optional[RoutingAction] = None) -> List[Phase]:
    if round_no == 1 or previous is None:
        return list(FIRST_ROUND)
    return previous.phases()


def next_phase(current: Optional[Phase], action: Optional[RoutingAction] = None) -> Optional[Phase]:
    """Phase after ``current``; after the quality gate the routing action decides (None ends the run)."""
    if current is None:
        return FIRST_ROUND[0]
    if current == Phase.QUALITY:
        if action is None:
            raise ValueError("the phase after the quality gate depends on a routing action")
        phases = action.phases()
        return phases[0] if phases else None
    return FIRST_ROUND[FIRST_ROUND.index(current) + 1]


# ============================================================================
# QUALITY GATE
# ============================================================================

def checked_draft(board: Blackboard, default_pause_ms: int = DEFAULT_PAUSE_MS) -> Optional[DraftScript]:
    """The text the length and taboo checks see: the stripped performance script, else the draft."""
    if board.performance_script:
        plain = strip_plain(parse_markup(board.performance_script, strict=False, default_pause_ms=default_pause_ms))
        return DraftScript.from_text(plain)
    return board.draft_script


@dataclass(frozen=True)
class WriterChecks:
    check_safe_lexical: bool
    check_length: bool
    speakable_chars: int
    taboo_hits: List[str] = field(default_factory=list)


def deterministic_checks(draft: DraftScript, profile: AudienceProfile, config: RunConfig) -> WriterChecks:
    bounds = config.length_bounds
    count = draft.speakable_char_count
    hits = [t for t in profile.taboo_list if t in draft.full_text]
    return WriterChecks(
        check_safe_lexical=not hits,
        check_length=bounds.min_chars <= count <= bounds.max_chars,
        speakable_chars=count,
        taboo_hits=hits,
    )


def apply_checks(report: QualityReport, checks: WriterChecks, config: RunConfig) -> QualityReport:
    """
    safe = lexical and agent; length = deterministic only; struct = agent only.
    Every failed deterministic check adds its own directive.
    """
    safe = report.check_safe and checks.check_safe_lexical
    length = checks.check_length
    q_writer = report.check_struct and safe and length
    directives = list(report.directives)
    if not checks.check_length:
        bounds = config.length_bounds
        directives.append(f"speakable length is {checks.speakable_chars} characters; "
                          f"bring it within {bounds.min_chars}..{bounds.max_chars}")
    if not checks.check_safe_lexical:
        directives.append(f"remove taboo terms: {', '.join(checks.taboo_hits)}")
    if not q_writer and not directives:
        directives.append("fix the script structure: every planned bit and callback must appear")
    directives = list(dict.fromkeys(directives))
    data = report.model_dump()
    data.update(check_safe=safe, check_length=length, q_writer=q_writer, directives=directives)
    return QualityReport.model_validate(data)


def build_writer_context(history: Sequence[SnapshotRecord], r: int) -> WriterContext:
    """
    Writer feedback for round ``r`` projected from the round r-1 snapshot.

    Raises:
        MissingHistory: r < 2, or no snapshot/report for round r-1
    """
    if r < 2:
        raise MissingHistory(r)
    previous = next((s for s in history if s.round == r - 1), None)
    if previous is None:
        raise MissingHistory(r)
    board = previous.board
    if len(board.quality_reports) < r - 1:
        raise MissingHistory(r)
    report = board.quality_reports[r - 2]

    known = set()
    for m in board.materials:
        known.add(m.id)
        known.update(m.source_joke_ids)
    preserved = [i for i in report.preserved_ids if i in known]
    dropped = [i for i in report.preserved_ids if i not in known]
    if dropped:
        logger.warning("preserved_ids_dropped", round=r, ids=dropped)
    return WriterContext(
        prev_script=board.draft_script,
        prev_materials=list(board.materials),
        directives=list(report.directives),
        prev_q_rag=report.q_rag,
        preserved_ids=preserved,
    )


# ============================================================================
# PERSISTENCE
# ============================================================================

def new_run_id(now: datetime, seed: Optional[int] = None) -> str:
    """Timestamp plus a six-hex suffix, seeded when ``seed`` is given."""
    if seed is None:
        suffix = secrets.token_hex(3)
    else:
        suffix = f"{random.Random(f'{seed}:{now.isoformat()}').getrandbits(24):06x}"
    return f"{now:%Y%m%dT%H%M%S}-{suffix}"


class RunStore:
    """
    Append-only writer for one run directory.

    A run id already taken under ``root`` gets a ``-2``, ``-3``, ... suffix;
    existing directories are never reused.
    """

    def __init__(self, root, run_id: str):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        candidate, n = run_id, 1
        while True:
            try:
                (root / candidate).mkdir()
                break
            except FileExistsError:
                n += 1
                candidate = f"{run_id}-{n}"
        if candidate != run_id:
            logger.info("run_id_taken", requested=run_id, run_id=candidate)
        self.run_id = candidate
        self.run_dir = root / candidate

    def write(self, relpath: str, text: str) -> Path:
        path = self.run_dir / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "x", encoding="utf-8") as f:
            f.write(text)
        return path

    def round_dir(self, round_no: int) -> Path:
        return self.run_dir / "rounds" / f"round_{round_no}"

    def save_config(self, config: RunConfig) -> None:
        self.write("config.json", dump_config(config) + "\n")

    def save_round(self, snap: SnapshotRecord, board: Blackboard) -> None:
        snap.save(self.run_dir)
        prefix = f"rounds/round_{snap.round}"
        report = board.quality_reports[snap.round - 1]
        self.write(f"{prefix}/quality_report.json",
                   json.dumps(report.model_dump(mode="json"), ensure_ascii=False, indent=2) + "\n")
        if board.draft_script is not None:
            self.write(f"{prefix}/draft.md", board.draft_script.to_markdown())
        if board.performance_script is not None:
            self.write(f"{prefix}/markup.txt", board.performance_script)


def script_markdown(topic: str, draft: DraftScript, markup_text: Optional[str]) -> str:
    parts = [f"# {topic}\n", draft.to_markdown()]
    if markup_text:
        parts.append(f"## 表演标记\n\n```\n{markup_text}\n```\n")
    return "\n".join(parts)


# ============================================================================
# PIPELINE
# ============================================================================

@dataclass
class RoundRecord:
    round: int
    phases: List[str]
    q_rag: bool
    q_writer: bool
    action: str
    speakable_chars: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "phases": self.phases,
            "q_rag": self.q_rag,
            "q_writer": self.q_writer,
            "action": self.action,
            "speakable_chars": self.speakable_chars,
        }


@dataclass
class RunResult:
    final_script: DraftScript
    performance_script: AnnotatedScript
    rounds_used: int
    passed: bool
    run_dir: Path
    run_id: str
    judge_report: Optional[JudgeReport] = None
    rounds: List[RoundRecord] = field(default_factory=list)
    board: Optional[Blackboard] = None
    audit: Optional[AuditLog] = None

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "best-effort"

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {
            "run_id": self.run_id,
            "rounds_used": self.rounds_used,
            "passed": self.passed,
            "status": self.status,
            "speakable_chars": self.rounds[-1].speakable_chars if self.rounds else self.final_script.speakable_char_count,
            "rounds": [r.to_dict() for r in self.rounds],
        }
        if self.judge_report is not None:
            doc["total"] = self.judge_report.total
        return doc


class OpenMicPipeline:
    """One run of the refinement loop over a shared AgentCrew."""

    def __init__(self, config: RunConfig, crew: AgentCrew, index: EmbeddingIndex, corpus: Corpus,
                 store: RunStore, judge: Optional[bool] = None):
        self.config = config
        self.crew = crew
        self.index = index
        self.corpus = corpus
        self.store = store
        self.judge = config.judge if judge is None else judge
        self.audit = AuditLog()
        self.params = RagParams.from_config(config)

    def _write(self, board: Blackboard, updates: Dict[str, Any], writer: str, round_no: int) -> Blackboard:
        for name, value in updates.items():
            board = write_field(board, name, value, writer=writer, audit=self.audit, round_no=round_no,
                                outline_bits=self.config.outline_bits)
        return board

    def _agent_turn(self, role_id: RoleId, board: Blackboard, round_no: int,
                    extra: Optional[WriterContext] = None, check=None) -> Blackboard:
        board_check = self.crew.board_check(role_id, board)

        def combined(data):
            if check is not None:
                check(data)
            board_check(data)

        out = self.crew.invoke(role_id, board, extra, check=combined)
        return self.crew.apply(role_id, board, board_updates(role_id, out.data, board),
                               audit=self.audit, round_no=round_no)

    def _retrieval(self, board: Blackboard, round_no: int, extra: Optional[WriterContext]) -> Blackboard:
        keywords = board.retrieval_keywords or [board.topic]
        feedback = board.quality_reports[-1].per_joke_feedback if board.quality_reports else None
        materials = run_rag(keywords, self.index, self.crew, self.params, board.excluded_joke_ids, feedback,
                            corpus=self.corpus, topic=board.topic, round_dir=self.store.round_dir(round_no))
        if extra is not None:
            kept = [m for m in extra.prev_materials if extra.is_kept(m)]
            kept_ids = {m.id for m in kept}
            materials = kept + [m for m in materials if m.id not in kept_ids]
        return self._write(board, {"materials": materials}, RAG_TURN, round_no)

    def _coaching_check(self, data) -> None:
        ast = parse_markup(data["markup"], strict=True, default_pause_ms=self.config.markup.default_pause_ms)
        compile_timeline(ast, self.config.chars_per_minute)

    def _stripped_draft(self, board: Blackboard) -> DraftScript:
        draft = checked_draft(board, self.config.markup.default_pause_ms)
        if draft is None:
            raise MissingField("draft_script", RoleId.QUALITY_CONTROLLER.value)
        return draft

    def _quality(self, board: Blackboard, round_no: int) -> Blackboard:
        if board.audience_profile is None:
            raise MissingField("audience_profile", RoleId.QUALITY_CONTROLLER.value)
        checks = deterministic_checks(self._stripped_draft(board), board.audience_profile, self.config)
        out = self.crew.invoke(
            RoleId.QUALITY_CONTROLLER, board,
            sections=[("speakable_char_count", checks.speakable_chars)],
            check=lambda data: parse_quality_report(data, round_no),
        )
        report = apply_checks(parse_quality_report(out.data, round_no), checks, self.config)
        logger.info("quality_verdict", round=round_no, q_rag=report.q_rag, q_writer=report.q_writer,
                    speakable_chars=checks.speakable_chars)
        return self.crew.apply(RoleId.QUALITY_CONTROLLER, board,
                               {"quality_reports": list(board.quality_reports) + [report]},
                               audit=self.audit, round_no=round_no)

    def _run_phase(self, phase: Phase, board: Blackboard, round_no: int,
                   extra: Optional[WriterContext]) -> Blackboard:
        logger.debug("turn", round=round_no, speaker=schedule_turn(phase))
        if phase == Phase.AUDIENCE:
            return self._agent_turn(RoleId.AUDIENCE_ANALYZER, board, round_no)
        if phase == Phase.DIRECTION:
            return self._agent_turn(RoleId.COMEDY_DIRECTOR, board, round_no)
        if phase == Phase.RETRIEVAL:
            return self._retrieval(board, round_no, extra)
        if phase == Phase.WRITING:
            return self._agent_turn(RoleId.JOKE_WRITER, board, round_no, extra)
        if phase == Phase.COACHING:
            return self._agent_turn(RoleId.PERFORMANCE_COACH, board, round_no, check=self._coaching_check)
        return self._quality(board, round_no)

    def _absorb(self, board: Blackboard, report: QualityReport, round_no: int) -> Blackboard:
        updates: Dict[str, Any] = {}
        excluded = sorted(set(board.excluded_joke_ids) | set(report.exclusions))
        if excluded != list(board.excluded_joke_ids):
            updates["excluded_joke_ids"] = excluded
        if not report.q_rag:
            updates["retrieval_keywords"] = list(report.refined_keywords)
        return self._write(board, updates, "orchestrator", round_no)

    def _finish(self, board: Blackboard, rounds: List[RoundRecord]) -> RunResult:
        draft = board.draft_script
        markup_text = board.performance_script or ""
        ast = parse_markup(markup_text, strict=False, default_pause_ms=self.config.markup.default_pause_ms)
        passed = board.quality_reports[-1].passed

        self.store.write("final/script.md", script_markdown(board.topic, draft, markup_text))
        self.store.write("final/markup.txt", markup_text)
        timeline = compile_timeline(ast, self.config.chars_per_minute,
                                    applause_ms=self.config.markup.applause_ms,
                                    laughter_ms=self.config.markup.laughter_ms)
        self.store.write("final/timeline.json", timeline_to_json(timeline) + "\n")

        judge_report = None
        if self.judge:
            judge_report = evaluate(markup_text or draft.full_text, self.crew)
            self.store.write("final/judge_report.json", judge_report.to_json() + "\n")

        result = RunResult(final_script=draft, performance_script=ast, rounds_used=len(rounds), passed=passed,
                           run_dir=self.store.run_dir, run_id=self.store.run_id, judge_report=judge_report,
                           rounds=rounds, board=board, audit=self.audit)
        self.store.write("final/result.json", json.dumps(result.to_dict(), ensure_ascii=False, indent=2) + "\n")
        logger.info("run_completed", run_id=result.run_id, rounds_used=result.rounds_used, status=result.status)
        return result

    def run(self, topic: str) -> RunResult:
        self.store.save_config(self.config)
        board = self._write(Blackboard(), {"topic": topic}, "user", 1)
        history: List[SnapshotRecord] = []
        rounds: List[RoundRecord] = []
        action: Optional[RoutingAction] = None

        for round_no in range(1, self.config.r_max + 1):
            phases = phases_for_round(round_no, action)
            extra = build_writer_context(history, round_no) if round_no > 1 else None
            for phase in phases:
                board = self._run_phase(phase, board, round_no, extra)

            report = board.quality_reports[-1]
            action = route(report.q_rag, report.q_writer, report)
            logger.info("routing_decision", round=round_no, action=action.kind.value)
            board = self._absorb(board, report, round_no)

            snap = snapshot(board, round_no)
            history.append(snap)
            self.store.save_round(snap, board)
            rounds.append(RoundRecord(
                round=round_no, phases=[schedule_turn(p) for p in phases], q_rag=report.q_rag,
                q_writer=report.q_writer, action=action.kind.value,
                speakable_chars=self._stripped_draft(board).speakable_char_count,
            ))
            if action.kind == RoutingKind.TERMINATE:
                break
        return self._finish(board, rounds)


def run_pipeline(topic: str, config: RunConfig, gateway: Gateway, index: EmbeddingIndex, *, corpus: Corpus,
                 run_root=None, clock: Callable[[], datetime] = datetime.now, seed: Optional[int] = None,
                 judge: Optional[bool] = None) -> RunResult:
    """Build the crew and run directory, then run the loop for ``topic``."""
    crew = AgentCrew.from_config(config, gateway)
    store = RunStore(run_root or config.run_root, new_run_id(clock(), seed))
    logger.info("run_started", run_id=store.run_id, topic=topic)
    return OpenMicPipeline(config, crew, index, corpus, store, judge=judge).run(topic)


# ============================================================================
# TEMPERATURE SWEEP
# ============================================================================

@dataclass
class SweepRow:
    temperature: float
    run_id: str
    passed: bool
    scores: Dict[str, float]
    total: float

    def to_dict(self) -> Dict[str, Any]:
        return {"temperature": self.temperature, "run_id": self.run_id, "passed": self.passed,
                "scores": self.scores, "total": self.total}


def run_temperature_sweep(topic: str, temperatures: Sequence[float], config: RunConfig,
                          gateway_factory: Callable[[RunConfig], Gateway], index: EmbeddingIndex, *,
                          corpus: Corpus, run_root, clock: Callable[[], datetime] = datetime.now,
                          seed: Optional[int] = None) -> List[SweepRow]:
    """One judged run per JokeWriter temperature, each under ``run_root/t<temperature>``."""
    rows: List[SweepRow] = []
    for temperature in temperatures:
        temps = dict(config.temperatures, **{RoleId.JOKE_WRITER.value: temperature})
        run_config = RunConfig.model_validate(dict(config.model_dump(), temperatures=temps, judge=True))
        result = run_pipeline(topic, run_config, gateway_factory(run_config), index, corpus=corpus,
                              run_root=Path(run_root) / f"t{temperature:g}", clock=clock, seed=seed, judge=True)
        report = result.judge_report
        scores = {d: getattr(report.scores, d) for d in ("persona", "humor", "reactivity", "coherence", "narrative")}
        rows.append(SweepRow(temperature=temperature, run_id=result.run_id, passed=result.passed,
                             scores=scores, total=report.total))
        logger.info("sweep_point", temperature=temperature, total=round(report.total, 4))
    return rows


# ============================================================================
# INSPECTION
# ============================================================================

def inspect_run(run_dir) -> Dict[str, Any]:
    """Per-round verdicts, routing and length read back from a run directory."""
    root = Path(run_dir)
    round_dirs = sorted((root / "rounds").glob("round_*"), key=lambda p: int(p.name.split("_", 1)[1]))
    rounds = []
    for directory in round_dirs:
        report_path = directory / "quality_report.json"
        if not report_path.exists():
            continue
        report = QualityReport.model_validate_json(report_path.read_text(encoding="utf-8"))
        board = board_from_json((directory / "blackboard.json").read_text(encoding="utf-8"))
        checked = checked_draft(board)
        rounds.append({
            "round": report.round,
            "q_rag": report.q_rag,
            "q_writer": report.q_writer,
            "action": route(report.q_rag, report.q_writer, report).kind.value,
            "speakable_chars": checked.speakable_char_count if checked else 0,
            "retrieval": (directory / "secret_blackboard.json").exists(),
        })
    result_path = root / "final" / "result.json"
    outcome = json.loads(result_path.read_text(encoding="utf-8")) if result_path.exists() else None
    return {"run_id": root.name, "rounds": rounds, "result": outcome}
