"""Shared fixtures: tiny corpus, role crew over the mock backend, scripted transcripts."""

import json
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import pytest
import structlog

from agents import AgentCrew
from config import RetrySettings, RunConfig
from llm_gateway import Gateway, ScriptedTranscript, mock_backend
from rag import Corpus, build_index, ingest_corpus


FIXED_CLOCK = datetime(2025, 1, 1, 12, 0, 0)

JOKES = [
    {"id": "j1", "text": "我去健身房办卡，教练说第一节课免费，我说那我每次都来上第一节。", "source": "cfun", "tags": ["健身"]},
    {"id": "j2", "text": "减肥最难的不是少吃，是看着别人吃还要夸好吃。", "source": "cfun", "tags": ["减肥"]},
    {"id": "j3", "text": "我妈说我胖，我说这是福气，她说那你福气也太满了。", "source": "cfun", "tags": ["家庭"]},
    {"id": "j4", "text": "老板说公司是我家，我说那我能不能在家办公。", "source": "user", "tags": ["职场"]},
    {"id": "j5", "text": "体重秤坏了，我高兴了一整天，后来发现是我坏了。", "source": "cfun", "tags": ["减肥"]},
    {"id": "j6", "text": "自律就是闹钟响了三次，我终于决定把它关掉。", "source": "user", "tags": ["自律"]},
]

# well inside the test length bounds (10..400 speakable characters)
DRAFT_BODY = "我最近在减肥，朋友问我效果怎么样，我说体重没掉，但是钱包瘦了不少。健身卡办了一年，只去过一次，那一次还是去退卡的。"


class FakeSleep:
    def __init__(self):
        self.calls: List[float] = []

    def __call__(self, seconds: float) -> None:
        self.calls.append(seconds)


class TranscriptBuilder:
    """Appends chat entries with per-role ordinals counted automatically."""

    def __init__(self):
        self.transcript = ScriptedTranscript()
        self._next: Dict[str, int] = {}

    def chat(self, role: str, body: Any) -> "TranscriptBuilder":
        ordinal = self._next.get(role, 0) + 1
        self._next[role] = ordinal
        self.transcript.add(role, ordinal, body)
        return self

    def count(self, role: str) -> int:
        return self._next.get(role, 0)

    def to_dict(self) -> Dict[str, Any]:
        return {"entries": [
            {"role": e.role, "ordinal": e.ordinal, "kind": e.kind, "body": e.body}
            for e in self.transcript.entries
        ]}

    def dump(self, path) -> str:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
        return str(path)


# ============================================================================
# DOCUMENTS
# ============================================================================

def profile_doc(taboos: Sequence[str] = ("政治",)) -> Dict[str, Any]:
    return {"persona": "二三十岁的上班族", "preferences": ["自嘲", "生活观察"],
            "taboo_list": list(taboos), "register": "口语化"}


def plan_doc(bits: int = 2, keywords: Sequence[str] = ("减肥", "健身")) -> Dict[str, Any]:
    return {
        "topic_expansion": {"subtopics": ["健身房", "节食"], "anecdote_angles": ["办卡"], "candidate_premises": []},
        "outline": {
            "opening_hook": "我最近在减肥",
            "bits": [{"premise": f"前提{i}", "intended_payoff": f"包袱{i}"} for i in range(bits)],
            "callback_plan": [{"source_bit_index": 0, "trigger_hint": "退卡"}],
            "closing_tag": "钱包瘦了",
        },
        "retrieval_keywords": list(keywords),
    }


def draft_doc(body: str = DRAFT_BODY) -> Dict[str, Any]:
    return {"sections": [{"label": "开场", "body": body}]}


def markup_doc(body: str = DRAFT_BODY) -> Dict[str, Any]:
    return {"markup": f"[pause:600]{body}[laughter]"}


def qc_doc(q_rag: bool, q_writer: bool, *, exclusions: Sequence[str] = (),
           preserved: Sequence[str] = (), feedback: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    doc: Dict[str, Any] = {
        "q_rag": q_rag, "q_writer": q_writer,
        "check_struct": q_writer, "check_safe": True, "check_length": True,
        "refined_keywords": [] if q_rag else ["健身房", "自律"],
        "exclusions": list(exclusions),
        "per_joke_feedback": feedback or {},
        "directives": [] if q_writer else ["callback missing for setup in line 3"],
        "preserved_ids": list(preserved),
    }
    return doc


def scores_doc(ids: Sequence[str], high: Sequence[str] = ("j1", "j2")) -> Dict[str, Any]:
    return {"scores": [
        {"id": i, "potential": 0.9 if i == high[0] else (0.8 if i in high else 0.1), "rationale": "r"} for i in ids
    ]}


def material_doc(joke_id: str) -> Dict[str, Any]:
    return {"materials": [{"setup": f"{joke_id}的铺垫", "punchline": f"{joke_id}的包袱", "usage_hint": "开场用"}]}


def judge_doc(persona=82.5, humor=95.5, reactivity=88.0, coherence=97.5, narrative=93.0) -> Dict[str, Any]:
    doc: Dict[str, Any] = {name: {"score": value, "rationale": f"{name} ok"} for name, value in
                           (("persona", persona), ("humor", humor), ("reactivity", reactivity),
                            ("coherence", coherence), ("narrative", narrative))}
    doc["timing"] = "停顿到位"
    return doc


def retrieval_round(builder: TranscriptBuilder, ids: Sequence[str], high: Sequence[str] = ("j1", "j2")) -> None:
    builder.chat("CandidateScorer", scores_doc(ids, high))
    for joke_id in high:
        if joke_id in ids:
            builder.chat("PunchlineSelector", material_doc(joke_id))


def scripted_run(verdicts: Sequence[tuple], ids: Sequence[str] = tuple(j["id"] for j in JOKES),
                 judge: bool = False, exclusions: Sequence[Sequence[str]] = (),
                 high: Sequence[str] = ("j1", "j2")) -> TranscriptBuilder:
    """
    Transcript for a full run whose QualityController answers ``verdicts``
    (one (q_rag, q_writer) pair per round). Corpus ids must all fit in k1.
    """
    builder = TranscriptBuilder()
    builder.chat("AudienceAnalyzer", profile_doc())
    builder.chat("ComedyDirector", plan_doc())
    excluded: set = set()
    previous = None
    for r, (q_rag, q_writer) in enumerate(verdicts):
        if previous is None or not previous[0]:
            retrieval_round(builder, [i for i in ids if i not in excluded], high)
        builder.chat("JokeWriter", draft_doc())
        builder.chat("PerformanceCoach", markup_doc())
        round_exclusions = list(exclusions[r]) if r < len(exclusions) else []
        builder.chat("QualityController", qc_doc(q_rag, q_writer, exclusions=round_exclusions))
        excluded.update(round_exclusions)
        previous = (q_rag, q_writer)
        if q_rag and q_writer:
            break
    if judge:
        builder.chat("Judge", judge_doc())
        builder.chat("Judge", judge_doc())
    return builder


# ============================================================================
# FIXTURES
# ============================================================================

@pytest.fixture(autouse=True)
def reset_logging():
    yield
    structlog.reset_defaults()


@pytest.fixture
def config(tmp_path) -> RunConfig:
    return RunConfig.model_validate({
        "r_max": 3,
        "k1": 50,
        "k2": 2,
        "tau": 0.5,
        "length_bounds": {"min_chars": 10, "max_chars": 400},
        "run_root": str(tmp_path / "runs"),
        "index_dir": str(tmp_path / "index"),
    })


@pytest.fixture
def corpus_path(tmp_path):
    path = tmp_path / "jokes.jsonl"
    path.write_text("\n".join(json.dumps(j, ensure_ascii=False) for j in JOKES) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def corpus(corpus_path) -> Corpus:
    return ingest_corpus(corpus_path)


@pytest.fixture
def fake_sleep() -> FakeSleep:
    return FakeSleep()


@pytest.fixture
def make_gateway(fake_sleep):
    def factory(transcript: Optional[ScriptedTranscript] = None, seed: int = 0) -> Gateway:
        return Gateway(mock_backend(transcript or ScriptedTranscript(), seed=seed), retry=RetrySettings(),
                       sleep=fake_sleep)
    return factory


@pytest.fixture
def make_crew(config, make_gateway):
    def factory(transcript: Optional[ScriptedTranscript] = None, run_config: Optional[RunConfig] = None) -> AgentCrew:
        return AgentCrew.from_config(run_config or config, make_gateway(transcript))
    return factory


@pytest.fixture
def index(corpus, config, make_gateway):
    return build_index(corpus, make_gateway(), config)
