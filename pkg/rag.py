#!/usr/bin/env python3
"""
OpenMic Retrieval
=================
Joke corpus ingestion, crosstalk-to-talkshow conversion, the exact cosine
index, and the three-stage material pipeline:

    retrieve (top-k1 by cosine) -> score (CandidateScorer, keep > tau, top-k2)
    -> distill (PunchlineSelector, dedup by setup/punchline)

Everything the pipeline sees lives on a per-invocation SecretBlackboard that
is written to the round directory. Only the distilled materials are
returned to the caller.
"""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from agents import AgentCrew, RoleId
from blackboard import Blackboard, Material
from config import RunConfig
from errors import AnonymizationFailure, CorpusError, DimensionMismatch, DuplicateId, MalformedLine, ZeroVector
from llm_gateway import EmbeddingVector, Gateway


logger = structlog.get_logger(__name__)

ANONYMOUS_NAME = "我朋友"
NORM_TOLERANCE = 1e-6


# ============================================================================
# CORPUS
# ============================================================================

class JokeRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str = Field(min_length=1)
    text: str
    source: Literal["cfun", "crosstalk_converted", "user"] = "user"
    tags: List[str] = Field(default_factory=list)
    style: str = ""

    @field_validator("text")
    @classmethod
    def _text_not_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("text must not be empty")
        return v


@dataclass
class Corpus:
    records: List[JokeRecord] = field(default_factory=list)
    skipped: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        self._by_id = {r.id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def get(self, joke_id: str) -> JokeRecord:
        try:
            return self._by_id[joke_id]
        except KeyError:
            raise CorpusError(f"joke id {joke_id!r} is not in the corpus")

    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    def digest(self) -> str:
        """Content hash naming the index file built from this corpus."""
        h = hashlib.sha256()
        for record in self.records:
            h.update(record.model_dump_json().encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()[:16]


def _jsonl_objects(path: Path) -> Iterable[Tuple[int, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as e:
                yield line_no, MalformedLine(line_no, f"invalid JSON ({e.msg})")


def ingest_corpus(path, strict: bool = True) -> Corpus:
    """
    Read a JSONL joke corpus.

    Strict mode stops at the first bad line. Lenient mode skips bad or
    duplicate lines and reports the count on ``Corpus.skipped``.

    Raises:
        MalformedLine: strict mode, line is not a valid record
        DuplicateId: strict mode, id seen on an earlier line
        CorpusError: file missing
    """
    corpus_path = Path(path)
    if not corpus_path.exists():
        raise CorpusError(f"corpus not found: {corpus_path}")

    records: List[JokeRecord] = []
    seen = set()
    skipped = 0
    for line_no, obj in _jsonl_objects(corpus_path):
        try:
            if isinstance(obj, MalformedLine):
                raise obj
            if not isinstance(obj, dict):
                raise MalformedLine(line_no, "line is not a JSON object")
            try:
                record = JokeRecord.model_validate(obj)
            except ValidationError as e:
                raise MalformedLine(line_no, "; ".join(
                    f"{'.'.join(str(p) for p in err['loc']) or 'record'}: {err['msg']}" for err in e.errors()))
            if record.id in seen:
                raise DuplicateId(record.id, line_no)
        except CorpusError as e:
            if strict:
                raise
            skipped += 1
            logger.warning("corpus_line_skipped", path=str(corpus_path), error=str(e))
            continue
        seen.add(record.id)
        records.append(record)

    if not records:
        logger.warning("empty_corpus", path=str(corpus_path))
    logger.info("corpus_ingested", path=str(corpus_path), records=len(records), skipped=skipped)
    return Corpus(records=records, skipped=skipped, path=str(corpus_path))


def write_corpus(records: Sequence[JokeRecord], path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.model_dump(mode="json"), ensure_ascii=False) + "\n")
    return out


# ============================================================================
# CROSSTALK CONVERSION
# ============================================================================

class CrosstalkScript(BaseModel):
    """One raw two-performer crosstalk piece."""
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    text: str = Field(min_length=1)
    tags: List[str] = Field(default_factory=list)


def load_crosstalk(path) -> Tuple[List[CrosstalkScript], int]:
    """Lenient read of a crosstalk JSONL file -> (scripts, skipped)."""
    scripts: List[CrosstalkScript] = []
    skipped = 0
    for line_no, obj in _jsonl_objects(Path(path)):
        try:
            if isinstance(obj, MalformedLine):
                raise obj
            scripts.append(CrosstalkScript.model_validate(obj))
        except (MalformedLine, ValidationError) as e:
            skipped += 1
            logger.warning("crosstalk_line_skipped", line=line_no, error=str(e))
    return scripts, skipped


def load_roster(path) -> List[str]:
    """Performer names, one per line; ``#`` starts a comment."""
    with open(path, "r", encoding="utf-8") as f:
        names = [line.split("#", 1)[0].strip() for line in f]
    return [n for n in names if n]


def anonymize(text: str, roster: Sequence[str]) -> str:
    for name in sorted(set(roster), key=len, reverse=True):
        text = text.replace(name, ANONYMOUS_NAME)
    return text


def surviving_names(text: str, roster: Sequence[str]) -> List[str]:
    return sorted({name for name in roster if name and name in text})


def convert_crosstalk(record: CrosstalkScript, crew: AgentCrew, roster: Sequence[str]) -> JokeRecord:
    """
    Rewrite one crosstalk piece as a first-person talk-show joke.

    Roster names are replaced before the LLM sees the text and the answer is
    scanned again afterwards.

    Raises:
        AnonymizationFailure: a roster name is present in the converted text
        CorpusError: empty roster
        GatewayError, SchemaViolation: propagated
    """
    if not roster:
        raise CorpusError("performer roster is empty")
    prepared = anonymize(record.text, roster)
    if prepared != record.text:
        logger.debug("crosstalk_prepass_replaced", record=record.id)

    out = crew.invoke(RoleId.CROSSTALK_CONVERTER, Blackboard(), sections=[
        ("crosstalk", {"text": prepared, "tags": list(record.tags), "style": "talkshow"}),
    ])
    text = out.data["text"]
    names = surviving_names(text, roster)
    if names:
        logger.error("anonymization_failed", record=record.id, names=names)
        raise AnonymizationFailure(record.id, names)
    return JokeRecord(
        id=f"xt-{record.id}",
        text=text,
        source="crosstalk_converted",
        tags=list(out.data.get("tags", record.tags)),
        style=out.data.get("style") or "talkshow",
    )


def convert_all(scripts: Sequence[CrosstalkScript], crew: AgentCrew,
                roster: Sequence[str]) -> Tuple[List[JokeRecord], List[AnonymizationFailure]]:
    """Convert every script; anonymization failures are collected, not raised."""
    converted: List[JokeRecord] = []
    failures: List[AnonymizationFailure] = []
    for script in scripts:
        try:
            converted.append(convert_crosstalk(script, crew, roster))
        except AnonymizationFailure as e:
            failures.append(e)
    logger.info("crosstalk_converted", converted=len(converted), failed=len(failures))
    return converted, failures


# ============================================================================
# INDEX
# ============================================================================

def _as_array(v) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return v.as_array()
    return np.asarray(v, dtype=np.float64)


def cosine_similarity(u, v) -> float:
    """
    u.v / (|u| |v|)

    Raises:
        DimensionMismatch: lengths differ
        ZeroVector: either vector is all zeros
    """
    a, b = _as_array(u), _as_array(v)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot compare vectors of dimension {a.shape[0]} and {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class EmbeddingIndex:
    """L2-normalized corpus vectors, one row per joke id."""
    dimension: int
    ids: List[str]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(len(self.ids), self.dimension)
        if self.dimension <= 0:
            raise DimensionMismatch(f"index dimension must be positive, got {self.dimension}")
        if len(set(self.ids)) != len(self.ids):
            raise CorpusError("index ids must be unique")
        if len(self.ids):
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise ZeroVector("index vectors must be L2-normalized")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def entries(self) -> List[Dict[str, Any]]:
        return [{"id": i, "vector": row.tolist()} for i, row in zip(self.ids, self.matrix)]

    def to_json(self) -> str:
        return json.dumps({"dimension": self.dimension, "entries": self.entries}, ensure_ascii=False)

    def save(self, path) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(self.to_json(), encoding="utf-8")
        return out

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        entries = doc.get("entries", [])
        dimension = int(doc["dimension"])
        matrix = np.array([e["vector"] for e in entries], dtype=np.float64) if entries \
            else np.zeros((0, dimension))
        return cls(dimension=dimension, ids=[e["id"] for e in entries], matrix=matrix)


def normalize_rows(ids: Sequence[str], vectors: Sequence[Sequence[float]]) -> np.ndarray:
    matrix = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    for joke_id, norm in zip(ids, norms):
        if norm == 0.0:
            raise ZeroVector(f"embedding of {joke_id!r} is all zeros")
    return matrix / norms[:, None]


def build_index(corpus: Corpus, gateway: Gateway, config: RunConfig, batch_size: int = 64) -> EmbeddingIndex:
    """Embed every record (parallel batches) and normalize."""
    if not len(corpus):
        raise CorpusError("cannot index an empty corpus")
    vectors = gateway.embed_batched(config.embedding_endpoint(), [r.text for r in corpus.records],
                                    batch_size=batch_size, parallelism=config.parallelism)
    dimension = vectors[0].dimension
    index = EmbeddingIndex(dimension=dimension, ids=corpus.ids(),
                           matrix=normalize_rows(corpus.ids(), [v.values for v in vectors]))
    logger.info("index_built", records=len(index), dimension=dimension)
    return index


def index_path(index_dir, corpus: Corpus) -> Path:
    return Path(index_dir) / f"{corpus.digest()}.idx.json"


def load_or_build_index(corpus: Corpus, gateway: Gateway, config: RunConfig) -> EmbeddingIndex:
    path = index_path(config.index_dir, corpus)
    if path.exists():
        index = EmbeddingIndex.load(path)
        if index.ids == corpus.ids():
            logger.debug("index_loaded", path=str(path))
            return index
        logger.warning("index_stale", path=str(path))
    index = build_index(corpus, gateway, config)
    index.save(path)
    return index


# ============================================================================
# PIPELINE STAGES
# ============================================================================

@dataclass(frozen=True)
class Candidate:
    record: JokeRecord
    similarity: float


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: Candidate
    potential: float
    rationale: str = ""

    @property
    def id(self) -> str:
        return self.candidate.record.id


def retrieve(index: EmbeddingIndex, query_vec, k1: int, exclusions: Iterable[str] = (), *,
             corpus: Corpus) -> List[Candidate]:
    """
    Exact top-k1 by cosine similarity, ties by ascending id, exclusions removed.

    Raises:
        DimensionMismatch: query and index disagree on dimension
        ZeroVector: the query is all zeros
    """
    if k1 < 1:
        raise ValueError(f"k1 must be positive, got {k1}")
    q = _as_array(query_vec)
    if q.shape[0] != index.dimension:
        raise DimensionMismatch(f"query has dimension {q.shape[0]}, index has {index.dimension}")
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ZeroVector("query vector is all zeros")
    if not len(index):
        return []

    sims = np.clip(index.matrix @ (q / norm), -1.0, 1.0)
    excluded = set(exclusions)
    ranked = sorted((i for i, joke_id in enumerate(index.ids) if joke_id not in excluded),
                    key=lambda i: (-sims[i], index.ids[i]))
    return [Candidate(record=corpus.get(index.ids[i]), similarity=float(sims[i])) for i in ranked[:k1]]


def select_candidates(scored: Sequence[ScoredCandidate], tau: float, k2: int) -> List[ScoredCandidate]:
    """Keep potential strictly above tau, then the k2 best (ties by id)."""
    kept = [s for s in scored if s.potential > tau]
    kept.sort(key=lambda s: (-s.potential, s.id))
    return kept[:k2]


def _batch_check(batch_ids: Sequence[str]):
    """
    Reject scores for ids outside the batch, and a first answer that leaves
    batch ids unscored. A repaired answer may still omit ids; those fall back
    to potential 0.
    """
    allowed = set(batch_ids)
    seen = {"answers": 0}

    def check(data):
        seen["answers"] += 1
        scored = [s["id"] for s in data["scores"]]
        stray = [i for i in scored if i not in allowed]
        if stray:
            raise ValueError(f"scores for unknown candidate ids: {stray}")
        missing = [i for i in batch_ids if i not in set(scored)]
        if missing and seen["answers"] == 1:
            raise ValueError(f"no score for candidate ids: {missing}")
    return check


def score_all(candidates: Sequence[Candidate], topic: str, crew: AgentCrew,
              feedback: Optional[Dict[str, str]] = None, *, batch_size: int = 10,
              parallelism: int = 4) -> List[ScoredCandidate]:
    """Potential for every candidate, in candidate order. Unscored ids get 0."""
    if not candidates:
        return []
    batches = [list(candidates[i:i + batch_size]) for i in range(0, len(candidates), batch_size)]
    ordinals = crew.gateway.reserve_ordinals(RoleId.CANDIDATE_SCORER.value, len(batches))
    board = Blackboard(topic=topic)

    def score_batch(job) -> Dict[str, Tuple[float, str]]:
        batch, ordinal = job
        ids = [c.record.id for c in batch]
        sections: List[Tuple[str, Any]] = [("candidates", [
            {"id": c.record.id, "text": c.record.text, "tags": list(c.record.tags)} for c in batch
        ])]
        relevant = {k: v for k, v in (feedback or {}).items() if k in set(ids)}
        if relevant:
            sections.append(("feedback", relevant))
        out = crew.invoke(RoleId.CANDIDATE_SCORER, board, sections=sections,
                          check=_batch_check(ids), ordinal=ordinal)
        return {s["id"]: (float(s["potential"]), s.get("rationale", "")) for s in out.data["scores"]}

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(score_batch, zip(batches, ordinals)))

    potentials: Dict[str, Tuple[float, str]] = {}
    for result in results:
        potentials.update(result)
    scored = []
    for c in candidates:
        if c.record.id not in potentials:
            logger.warning("candidate_unscored", joke_id=c.record.id)
        potential, rationale = potentials.get(c.record.id, (0.0, ""))
        scored.append(ScoredCandidate(candidate=c, potential=potential, rationale=rationale))
    return scored


def score_candidates(candidates: Sequence[Candidate], topic: str, crew: AgentCrew, tau: float, k2: int,
                     feedback: Optional[Dict[str, str]] = None, *, batch_size: int = 10,
                     parallelism: int = 4) -> List[ScoredCandidate]:
    """CandidateScorer in batches, then filter-and-rank."""
    scored = score_all(candidates, topic, crew, feedback, batch_size=batch_size, parallelism=parallelism)
    return select_candidates(scored, tau, k2)


def material_id(setup: str, punchline: str) -> str:
    return "m-" + hashlib.sha1(f"{setup}\x1f{punchline}".encode("utf-8")).hexdigest()[:10]


def _has_content(data):
    for item in data["materials"]:
        if not (item["setup"].strip() or item["punchline"].strip()):
            raise ValueError("each material needs a setup or a punchline")


def distill_materials(selected: Sequence[ScoredCandidate], topic: str, crew: AgentCrew) -> List[Material]:
    """One PunchlineSelector call per selected joke; equal (setup, punchline) pairs merge."""
    merged: Dict[Tuple[str, str], Dict[str, Any]] = {}
    board = Blackboard(topic=topic)
    for s in selected:
        out = crew.invoke(RoleId.PUNCHLINE_SELECTOR, board, sections=[("joke", {
            "id": s.id, "text": s.candidate.record.text, "potential": s.potential, "rationale": s.rationale,
        })], check=_has_content)
        for item in out.data["materials"]:
            key = (item["setup"].strip(), item["punchline"].strip())
            entry = merged.setdefault(key, {"usage_hint": item.get("usage_hint", ""), "sources": []})
            if s.id not in entry["sources"]:
                entry["sources"].append(s.id)
    return [
        Material(id=material_id(setup, punchline), source_joke_ids=entry["sources"], setup=setup,
                 punchline=punchline, usage_hint=entry["usage_hint"])
        for (setup, punchline), entry in merged.items()
    ]


# ============================================================================
# SECRET BLACKBOARD
# ============================================================================

@dataclass
class SecretBlackboard:
    """Private store of one pipeline invocation. Only released_materials leave it."""
    keywords: List[str] = field(default_factory=list)
    exclusions: List[str] = field(default_factory=list)
    raw_candidates: List[Candidate] = field(default_factory=list)
    scored: List[ScoredCandidate] = field(default_factory=list)
    released_materials: List[Material] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "keywords": self.keywords,
            "exclusions": sorted(self.exclusions),
            "raw_candidates": [
                {"id": c.record.id, "text": c.record.text, "similarity": c.similarity} for c in self.raw_candidates
            ],
            "scored": [{"id": s.id, "potential": s.potential, "rationale": s.rationale} for s in self.scored],
            "released_materials": [m.model_dump(mode="json") for m in self.released_materials],
        }
        return json.dumps(doc, ensure_ascii=False, indent=2)

    def save(self, round_dir) -> Path:
        path = Path(round_dir) / "secret_blackboard.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "x", encoding="utf-8") as f:
            f.write(self.to_json())
        return path


@dataclass(frozen=True)
class RagParams:
    k1: int = 50
    k2: int = 8
    tau: float = 0.6
    batch_size: int = 10
    parallelism: int = 4

    @classmethod
    def from_config(cls, config: RunConfig) -> "RagParams":
        return cls(k1=config.k1, k2=config.k2, tau=config.tau, batch_size=config.scoring_batch_size,
                   parallelism=config.parallelism)


def run_rag(keywords: Sequence[str], index: EmbeddingIndex, crew: AgentCrew, params: RagParams,
            exclusions: Iterable[str] = (), feedback: Optional[Dict[str, str]] = None, *, corpus: Corpus,
            topic: Optional[str] = None, round_dir=None) -> List[Material]:
    """
    retrieve -> score -> distill for one query.

    The query is the keywords joined by spaces. Intermediates go to a fresh
    SecretBlackboard, saved under ``round_dir`` when given.
    """
    keywords = [k for k in keywords if k.strip()]
    if not keywords:
        raise ValueError("run_rag needs at least one keyword")
    query = " ".join(keywords)
    secret = SecretBlackboard(keywords=list(keywords), exclusions=sorted(set(exclusions)))

    query_vec = crew.gateway.embed(crew.config.embedding_endpoint(), [query])[0]
    secret.raw_candidates = retrieve(index, query_vec, params.k1, secret.exclusions, corpus=corpus)
    secret.scored = score_all(secret.raw_candidates, topic or query, crew, feedback,
                              batch_size=params.batch_size, parallelism=params.parallelism)
    selected = select_candidates(secret.scored, params.tau, params.k2)
    secret.released_materials = distill_materials(selected, topic or query, crew)

    logger.info("rag_completed", query=query, candidates=len(secret.raw_candidates),
                selected=len(selected), materials=len(secret.released_materials))
    if round_dir is not None:
        secret.save(round_dir)
    return list(secret.released_materials)
