import json
import random

import pytest

from blackboard import (
    AuditLog,
    Blackboard,
    DraftScript,
    Material,
    QualityReport,
    board_from_json,
    board_to_json,
    read_field,
    snapshot,
    write_field,
)
from conftest import DRAFT_BODY, plan_doc, profile_doc
from errors import InvariantViolation, UnknownField


def _report(round_no, q_rag=True, q_writer=True, **extra):
    return QualityReport(round=round_no, q_rag=q_rag, q_writer=q_writer, check_struct=q_writer,
                         check_safe=True, check_length=True,
                         refined_keywords=[] if q_rag else ["健身房"], **extra)


def test_write_replaces_one_field():
    board = Blackboard()
    updated = write_field(board, "topic", "减肥", writer="user")
    assert updated.topic == "减肥"
    assert board.topic == ""
    assert updated.model_dump(exclude={"topic"}) == board.model_dump(exclude={"topic"})


def test_board_is_immutable():
    board = Blackboard(topic="减肥")
    with pytest.raises(Exception):
        board.topic = "加班"


def test_unknown_field():
    with pytest.raises(UnknownField):
        write_field(Blackboard(), "raw_candidates", [])
    with pytest.raises(UnknownField):
        write_field(Blackboard(), "round_counter", 3)
    with pytest.raises(UnknownField):
        read_field(Blackboard(), "scored")


def test_read_round_counter():
    board = write_field(Blackboard(), "quality_reports", [_report(1)])
    assert read_field(board, "round_counter") == 1


def test_blank_topic_rejected():
    with pytest.raises(InvariantViolation):
        write_field(Blackboard(), "topic", "   ")


def test_type_mismatch_is_invariant_violation():
    with pytest.raises(InvariantViolation) as exc:
        write_field(Blackboard(), "audience_profile", {"persona": ""})
    assert exc.value.field == "audience_profile"


def test_outline_bit_bounds():
    outline = plan_doc(bits=1)["outline"]
    with pytest.raises(InvariantViolation):
        write_field(Blackboard(), "outline", outline)
    assert len(write_field(Blackboard(), "outline", outline, outline_bits=(1, 3)).outline.bits) == 1


def test_callback_must_point_at_a_bit():
    outline = plan_doc(bits=2)["outline"]
    outline["callback_plan"] = [{"source_bit_index": 5, "trigger_hint": "x"}]
    with pytest.raises(InvariantViolation):
        write_field(Blackboard(), "outline", outline)


def test_round_counter_tracks_reports():
    board = Blackboard()
    assert board.round_counter == 0
    board = write_field(board, "quality_reports", [_report(1, q_rag=False)])
    board = write_field(board, "quality_reports", [*board.quality_reports, _report(2)])
    assert board.round_counter == 2


def test_report_rounds_must_be_sequential():
    with pytest.raises(InvariantViolation):
        write_field(Blackboard(), "quality_reports", [_report(2)])


def test_exclusions_only_grow():
    board = write_field(Blackboard(), "excluded_joke_ids", ["j1", "j2"])
    board = write_field(board, "excluded_joke_ids", ["j1", "j2", "j3"])
    with pytest.raises(InvariantViolation):
        write_field(board, "excluded_joke_ids", ["j3"])


def test_material_ids_unique():
    m = {"id": "m-1", "source_joke_ids": ["j1"], "setup": "铺垫", "punchline": "包袱"}
    with pytest.raises(InvariantViolation):
        write_field(Blackboard(), "materials", [m, m])


def test_material_needs_content():
    with pytest.raises(ValueError):
        Material(id="m-1", source_joke_ids=["j1"])


def test_draft_derives_text_and_count():
    draft = DraftScript(sections=[{"label": "开场", "body": "大家好"}, {"label": "结尾", "body": "谢谢abc"}])
    assert draft.full_text == "大家好谢谢abc"
    assert draft.speakable_char_count == 8
    assert DraftScript.from_text(DRAFT_BODY).full_text == DRAFT_BODY


def test_quality_report_conjunction():
    with pytest.raises(ValueError):
        QualityReport(round=1, q_rag=True, q_writer=True, check_struct=True, check_safe=False, check_length=True)
    with pytest.raises(ValueError):
        QualityReport(round=1, q_rag=False, q_writer=True, check_struct=True, check_safe=True, check_length=True)
    report = _report(1, exclusions=["j2", "j1", "j2"])
    assert report.exclusions == ["j1", "j2"]
    assert report.passed


def test_audit_log_records_writes():
    audit = AuditLog()
    board = write_field(Blackboard(), "topic", "减肥", writer="user", audit=audit, round_no=0)
    board = write_field(board, "audience_profile", profile_doc(), writer="AudienceAnalyzer", audit=audit, round_no=0)
    write_field(board, "draft_script", DraftScript.from_text(DRAFT_BODY), writer="JokeWriter", audit=audit)
    assert audit.fields_written(0) == {"topic", "audience_profile"}
    assert audit.fields_written(1) == {"draft_script"}
    assert audit.writers_of("draft_script") == {"JokeWriter"}


def test_json_round_trip_omits_unset():
    board = write_field(Blackboard(), "topic", "减肥")
    board = write_field(board, "audience_profile", profile_doc())
    doc = json.loads(board_to_json(board))
    assert "outline" not in doc
    assert doc["round_counter"] == 0
    assert board_from_json(board_to_json(board)) == board


def test_snapshot_is_frozen_copy():
    board = write_field(Blackboard(), "topic", "减肥")
    snap = snapshot(board, 0)
    later = write_field(board, "topic", "加班")
    assert snap.board.topic == "减肥"
    assert later.topic == "加班"
    assert snapshot(board, 0).payload == snap.payload


def test_snapshot_round_out_of_range():
    with pytest.raises(InvariantViolation):
        snapshot(Blackboard(), 1)


def test_snapshot_save_never_overwrites(tmp_path):
    snap = snapshot(write_field(Blackboard(), "topic", "减肥"), 0)
    path = snap.save(tmp_path)
    assert path == tmp_path / "rounds" / "round_0" / "blackboard.json"
    with pytest.raises(FileExistsError):
        snap.save(tmp_path)


def _random_value(rng, board, field_name):
    if field_name == "topic":
        return rng.choice(["减肥", "加班", "相亲", "健身"])
    if field_name == "audience_profile":
        return profile_doc(taboos=rng.sample(["政治", "宗教", "疾病"], rng.randint(0, 2)))
    if field_name == "topic_expansion":
        return plan_doc()["topic_expansion"]
    if field_name == "outline":
        return plan_doc(bits=rng.randint(2, 3))["outline"]
    if field_name == "draft_script":
        return {"sections": [{"label": "开场", "body": DRAFT_BODY[:rng.randint(1, len(DRAFT_BODY))]}]}
    if field_name == "performance_script":
        return f"[pause:{rng.randint(1, 9) * 100}]" + DRAFT_BODY[:rng.randint(1, 20)]
    if field_name == "materials":
        return [{"id": f"m-{i}", "source_joke_ids": [f"j{i}"], "setup": "铺垫", "punchline": f"包袱{i}"}
                for i in rng.sample(range(10), rng.randint(0, 3))]
    if field_name == "quality_reports":
        return [_report(r, q_rag=rng.random() < 0.5) for r in range(1, rng.randint(0, 3) + 1)]
    if field_name == "retrieval_keywords":
        return rng.sample(["减肥", "健身", "自律", "节食"], rng.randint(0, 3))
    grown = set(board.excluded_joke_ids) | {f"j{rng.randint(1, 30)}" for _ in range(rng.randint(0, 2))}
    return sorted(grown)


@pytest.mark.parametrize("seed", range(20))
def test_random_writes_touch_only_their_field(seed):
    rng = random.Random(seed)
    fields = list(Blackboard.model_fields)
    audit = AuditLog()
    board = Blackboard()
    expected = board.model_dump(mode="json")
    for step in range(40):
        name = rng.choice(fields)
        value = _random_value(rng, board, name)
        before = board.model_dump(mode="json")
        updated = write_field(board, name, value, writer=f"w{step}", audit=audit)

        expected[name] = Blackboard.model_validate({name: value}).model_dump(mode="json")[name]
        expected["round_counter"] = len(expected["quality_reports"])
        assert updated.model_dump(mode="json") == expected
        assert board.model_dump(mode="json") == before
        assert audit.records[-1].field == name and audit.records[-1].writer == f"w{step}"
        board = updated
    assert len(audit.records) == 40
