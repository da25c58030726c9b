import json

import numpy as np
import pytest

from conftest import JOKES, TranscriptBuilder, material_doc, retrieval_round, scores_doc
from errors import AnonymizationFailure, CorpusError, DimensionMismatch, DuplicateId, MalformedLine, ZeroVector
from rag import (
    ANONYMOUS_NAME,
    Candidate,
    Corpus,
    CrosstalkScript,
    EmbeddingIndex,
    JokeRecord,
    RagParams,
    ScoredCandidate,
    anonymize,
    build_index,
    convert_all,
    convert_crosstalk,
    cosine_similarity,
    distill_materials,
    index_path,
    ingest_corpus,
    load_or_build_index,
    load_roster,
    retrieve,
    run_rag,
    score_all,
    score_candidates,
    select_candidates,
    write_corpus,
)


ROSTER = ["郭德纲", "于谦", "王二"]


def _record(joke_id, text="笑话"):
    return JokeRecord(id=joke_id, text=text)


def _scored(joke_id, potential):
    return ScoredCandidate(Candidate(_record(joke_id), 0.5), potential)


# ============================================================================
# CORPUS
# ============================================================================

def test_ingest(corpus):
    assert corpus.ids() == [j["id"] for j in JOKES]
    assert corpus.get("j1").source == "cfun"
    assert corpus.skipped == 0
    with pytest.raises(CorpusError):
        corpus.get("j99")


def _messy(tmp_path):
    path = tmp_path / "messy.jsonl"
    path.write_text("\n".join([
        json.dumps({"id": "a", "text": "第一条"}, ensure_ascii=False),
        "{not json",
        json.dumps({"id": "b", "text": "   "}),
        "",
        json.dumps({"id": "a", "text": "重复的"}, ensure_ascii=False),
        json.dumps({"id": "c", "text": "第三条", "source": "cfun"}, ensure_ascii=False),
    ]) + "\n", encoding="utf-8")
    return path


def test_ingest_strict_stops_at_first_bad_line(tmp_path):
    with pytest.raises(MalformedLine) as exc:
        ingest_corpus(_messy(tmp_path))
    assert exc.value.line_no == 2
    assert exc.value.exit_code == 2


def test_ingest_lenient_skips(tmp_path):
    corpus = ingest_corpus(_messy(tmp_path), strict=False)
    assert corpus.ids() == ["a", "c"]
    assert corpus.skipped == 3


def test_duplicate_id_strict(tmp_path):
    path = tmp_path / "dup.jsonl"
    path.write_text('{"id": "a", "text": "x"}\n{"id": "a", "text": "y"}\n', encoding="utf-8")
    with pytest.raises(DuplicateId) as exc:
        ingest_corpus(path)
    assert exc.value.line_no == 2


def test_unknown_source_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "text": "x", "source": "weibo"}\n', encoding="utf-8")
    with pytest.raises(MalformedLine):
        ingest_corpus(path)


def test_missing_corpus(tmp_path):
    with pytest.raises(CorpusError):
        ingest_corpus(tmp_path / "nope.jsonl")


def test_write_corpus_reads_back(tmp_path, corpus):
    path = write_corpus(corpus.records, tmp_path / "copy.jsonl")
    assert ingest_corpus(path).records == corpus.records


def test_digest_tracks_content(corpus):
    changed = Corpus(records=corpus.records[:-1])
    assert corpus.digest() != changed.digest()
    assert corpus.digest() == Corpus(records=list(corpus.records)).digest()


# ============================================================================
# COSINE / INDEX
# ============================================================================

@pytest.mark.parametrize("u,v,expected", [
    ([1, 0], [0, 1], 0.0),
    ([1, 2, 3], [1, 2, 3], 1.0),
    ([1, 2], [-1, -2], -1.0),
    ([3, 4], [6, 8], 1.0),
])
def test_cosine(u, v, expected):
    assert cosine_similarity(u, v) == pytest.approx(expected)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])


def test_index_requires_normalized_rows():
    with pytest.raises(ZeroVector):
        EmbeddingIndex(dimension=2, ids=["a"], matrix=[[3.0, 4.0]])


def test_index_save_and_load(tmp_path, index, corpus):
    path = index.save(index_path(tmp_path, corpus))
    loaded = EmbeddingIndex.load(path)
    assert loaded.ids == index.ids
    assert loaded.dimension == 256
    assert np.allclose(loaded.matrix, index.matrix)


def test_build_index_rejects_empty(config, make_gateway):
    with pytest.raises(CorpusError):
        build_index(Corpus(), make_gateway(), config)


def test_load_or_build_reuses_file(corpus, config, make_gateway):
    gateway = make_gateway()
    first = load_or_build_index(corpus, gateway, config)
    calls = len(gateway.calls)
    second = load_or_build_index(corpus, gateway, config)
    assert len(gateway.calls) == calls
    assert second.ids == first.ids


def test_retrieve_matches_brute_force_with_ties():
    rng = np.random.default_rng(11)
    dim = 8
    distinct = rng.normal(size=(500, dim))
    distinct /= np.linalg.norm(distinct, axis=1, keepdims=True)
    # repeated basis vectors give bit-identical similarities, i.e. exact ties
    basis = np.eye(dim)[rng.integers(0, dim, size=500)]
    rows = np.vstack([distinct, basis])
    ids = [f"j{i:04d}" for i in rng.permutation(len(rows))]
    corpus = Corpus(records=[_record(i) for i in ids])
    index = EmbeddingIndex(dimension=dim, ids=ids, matrix=rows)
    excluded = set(ids[:25])

    for _ in range(5):
        query = rng.normal(size=dim)
        got = retrieve(index, query, 50, excluded, corpus=corpus)
        oracle = sorted(
            ((round(cosine_similarity(row, query), 9), joke_id) for joke_id, row in zip(ids, rows)
             if joke_id not in excluded),
            key=lambda pair: (-pair[0], pair[1]),
        )[:50]
        assert [c.record.id for c in got] == [joke_id for _, joke_id in oracle]
        assert all(-1.0 <= c.similarity <= 1.0 for c in got)


def test_retrieve_never_returns_excluded_ids():
    rng = np.random.default_rng(5)
    dim = 8
    distinct = rng.normal(size=(900, dim))
    distinct /= np.linalg.norm(distinct, axis=1, keepdims=True)
    rows = np.vstack([distinct, np.eye(dim)[rng.integers(0, dim, size=300)]])
    ids = [f"j{i:04d}" for i in rng.permutation(len(rows))]
    corpus = Corpus(records=[_record(i) for i in ids])
    index = EmbeddingIndex(dimension=dim, ids=ids, matrix=rows)

    for trial in range(100):
        k1 = (1, 5, 50, 1000)[trial % 4]
        excluded = {str(i) for i in rng.choice(ids, size=int(rng.integers(0, 400)), replace=False)}
        excluded |= {f"x{n}" for n in range(int(rng.integers(0, 3)))}
        query = rng.normal(size=dim)
        got = retrieve(index, query, k1, excluded, corpus=corpus)

        sims = np.clip(index.matrix @ (query / np.linalg.norm(query)), -1.0, 1.0)
        oracle = sorted((i for i, joke_id in enumerate(ids) if joke_id not in excluded),
                        key=lambda i: (-sims[i], ids[i]))[:k1]
        got_ids = [c.record.id for c in got]
        assert not set(got_ids) & excluded
        assert len(got) == min(k1, len(ids) - len(excluded & set(ids)))
        assert got_ids == [ids[i] for i in oracle]
        assert all(a.similarity >= b.similarity for a, b in zip(got, got[1:]))


def test_retrieve_edge_cases(index, corpus):
    query = np.ones(index.dimension)
    assert len(retrieve(index, query, 3, corpus=corpus)) == 3
    assert len(retrieve(index, query, 50, corpus=corpus)) == len(corpus)
    assert retrieve(index, query, 50, corpus.ids(), corpus=corpus) == []
    with pytest.raises(DimensionMismatch):
        retrieve(index, np.ones(4), 3, corpus=corpus)
    with pytest.raises(ZeroVector):
        retrieve(index, np.zeros(index.dimension), 3, corpus=corpus)


# ============================================================================
# SCORING / DISTILLATION
# ============================================================================

def test_select_candidates_filter_then_rank():
    scored = [_scored("j1", 0.9), _scored("j2", 0.5), _scored("j3", 0.2)]
    assert [s.id for s in select_candidates(scored, 0.6, 2)] == ["j1"]
    assert [s.id for s in select_candidates(scored, 0.1, 2)] == ["j1", "j2"]
    assert select_candidates(scored, 0.9, 2) == []


def test_select_ties_by_id():
    scored = [_scored("b", 0.7), _scored("a", 0.7), _scored("c", 0.7)]
    assert [s.id for s in select_candidates(scored, 0.6, 2)] == ["a", "b"]


def test_score_candidates_through_scorer(corpus, make_crew):
    builder = TranscriptBuilder().chat("CandidateScorer", {"scores": [
        {"id": "j1", "potential": 0.9, "rationale": "好"},
        {"id": "j2", "potential": 0.5, "rationale": "一般"},
        {"id": "j3", "potential": 0.2, "rationale": "弱"},
    ]})
    crew = make_crew(builder.transcript)
    candidates = [Candidate(corpus.get(i), 0.5) for i in ("j1", "j2", "j3")]
    selected = score_candidates(candidates, "减肥", crew, tau=0.6, k2=2)
    assert [s.id for s in selected] == ["j1"]
    assert selected[0].rationale == "好"


def test_score_empty_makes_no_calls(make_crew):
    crew = make_crew()
    assert score_all([], "减肥", crew) == []
    assert crew.gateway.calls == []


def test_scores_batched_in_order(corpus, make_crew):
    ids = corpus.ids()
    builder = (TranscriptBuilder().chat("CandidateScorer", scores_doc(ids[:4]))
               .chat("CandidateScorer", scores_doc(ids[4:])))
    crew = make_crew(builder.transcript)
    scored = score_all([Candidate(r, 0.1) for r in corpus.records], "减肥", crew, batch_size=4, parallelism=2)
    assert [s.id for s in scored] == ids
    assert [s.potential for s in scored] == [0.9, 0.8, 0.1, 0.1, 0.1, 0.1]


def test_scorer_unknown_id_is_repaired(corpus, make_crew):
    builder = (TranscriptBuilder().chat("CandidateScorer", scores_doc(["j1", "j77"]))
               .chat("CandidateScorer", scores_doc(["j1"])))
    crew = make_crew(builder.transcript)
    scored = score_all([Candidate(corpus.get("j1"), 0.4), Candidate(corpus.get("j2"), 0.3)], "减肥", crew)
    assert [(s.id, s.potential) for s in scored] == [("j1", 0.9), ("j2", 0.0)]


def test_scorer_partial_answer_is_repaired(corpus, make_crew):
    builder = (TranscriptBuilder().chat("CandidateScorer", scores_doc(["j1"]))
               .chat("CandidateScorer", {"scores": [
                   {"id": "j1", "potential": 0.7, "rationale": "r"},
                   {"id": "j2", "potential": 0.95, "rationale": "r"},
                   {"id": "j3", "potential": 0.1, "rationale": "r"},
               ]}))
    crew = make_crew(builder.transcript)
    candidates = [Candidate(corpus.get(i), 0.5) for i in ("j1", "j2", "j3")]
    selected = score_candidates(candidates, "减肥", crew, tau=0.6, k2=2)
    assert [s.id for s in selected] == ["j2", "j1"]
    assert crew.gateway.attempts_for("CandidateScorer") == [1, 1]
    repair = crew.gateway.backend.requests[-1][2].messages[-1].content
    assert "no score for candidate ids" in repair


def test_distill_dedups_equal_materials(corpus, make_crew):
    same = {"materials": [{"setup": "办卡", "punchline": "只上第一节", "usage_hint": "开场"}]}
    builder = TranscriptBuilder().chat("PunchlineSelector", same).chat("PunchlineSelector", {"materials": [
        {"setup": " 办卡 ", "punchline": "只上第一节", "usage_hint": "别处"},
        {"setup": "", "punchline": "钱包瘦了", "usage_hint": "收尾"},
    ]})
    crew = make_crew(builder.transcript)
    selected = [ScoredCandidate(Candidate(corpus.get(i), 0.5), 0.9) for i in ("j1", "j5")]
    materials = distill_materials(selected, "减肥", crew)
    assert len(materials) == 2
    assert materials[0].source_joke_ids == ["j1", "j5"]
    assert materials[0].usage_hint == "开场"
    assert materials[1].source_joke_ids == ["j5"]
    assert all(m.id.startswith("m-") for m in materials)


# ============================================================================
# PIPELINE
# ============================================================================

def test_run_rag_releases_only_materials(tmp_path, index, corpus, config, make_crew):
    remaining = [i for i in corpus.ids() if i != "j3"]
    builder = TranscriptBuilder()
    retrieval_round(builder, remaining)
    crew = make_crew(builder.transcript)
    round_dir = tmp_path / "round_1"
    materials = run_rag(["减肥", "健身"], index, crew, RagParams.from_config(config), exclusions=["j3"],
                        corpus=corpus, topic="减肥", round_dir=round_dir)

    assert [m.source_joke_ids for m in materials] == [["j1"], ["j2"]]
    secret = json.loads((round_dir / "secret_blackboard.json").read_text(encoding="utf-8"))
    assert secret["keywords"] == ["减肥", "健身"]
    assert secret["exclusions"] == ["j3"]
    assert sorted(c["id"] for c in secret["raw_candidates"]) == sorted(remaining)
    assert len(secret["scored"]) == len(remaining)
    assert len(secret["released_materials"]) == 2


def test_run_rag_needs_keywords(index, corpus, config, make_crew):
    with pytest.raises(ValueError):
        run_rag(["  "], index, make_crew(), RagParams.from_config(config), corpus=corpus)


# ============================================================================
# CROSSTALK
# ============================================================================

def test_anonymize_longest_name_first():
    assert anonymize("王二和王二小", ["王二小", "王二"]) == f"{ANONYMOUS_NAME}和{ANONYMOUS_NAME}"


def test_load_roster(tmp_path):
    path = tmp_path / "roster.txt"
    path.write_text("# performers\n郭德纲\n于谦  # 捧哏\n\n", encoding="utf-8")
    assert load_roster(path) == ["郭德纲", "于谦"]


def test_convert_crosstalk_echo(make_crew):
    crew = make_crew(TranscriptBuilder().chat("CrosstalkConverter", {"echo": True}).transcript)
    script = CrosstalkScript(id="x1", text="郭德纲：于谦你最近减肥了吗？于谦：减了，减掉了钱包。", tags=["减肥"])
    record = convert_crosstalk(script, crew, ROSTER)
    assert record.id == "xt-x1"
    assert record.source == "crosstalk_converted"
    assert "郭德纲" not in record.text and "于谦" not in record.text
    assert ANONYMOUS_NAME in record.text
    assert record.tags == ["减肥"]


def test_convert_crosstalk_surviving_name(make_crew):
    crew = make_crew(TranscriptBuilder().chat("CrosstalkConverter", {"text": "于谦说他胖了"}).transcript)
    with pytest.raises(AnonymizationFailure) as exc:
        convert_crosstalk(CrosstalkScript(id="x2", text="捧哏：我胖了"), crew, ROSTER)
    assert exc.value.names == ["于谦"]
    assert exc.value.exit_code == 5


def test_convert_all_collects_failures(make_crew):
    builder = (TranscriptBuilder().chat("CrosstalkConverter", {"text": "郭德纲又来了"})
               .chat("CrosstalkConverter", {"echo": True}))
    crew = make_crew(builder.transcript)
    scripts = [CrosstalkScript(id="a", text="逗哏：你好"), CrosstalkScript(id="b", text="王二：你好")]
    converted, failures = convert_all(scripts, crew, ROSTER)
    assert [r.id for r in converted] == ["xt-b"]
    assert [f.record_id for f in failures] == ["a"]


def test_convert_needs_roster(make_crew):
    with pytest.raises(CorpusError):
        convert_crosstalk(CrosstalkScript(id="a", text="你好"), make_crew(), [])
