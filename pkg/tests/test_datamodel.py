import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmel.datamodel import (
    DatasetError,
    DatasetStats,
    EntityRecord,
    MentionSample,
    compute_stats,
    drop_flagged,
    load_entities,
    load_samples,
    save_entities,
    save_samples,
    validate_dataset,
)


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows), encoding="utf-8")
    return path


def sample_row(sid, mention="Trump", gold="Q22686", **extra):
    return {"sample_id": sid, "mention": mention, "text": f"{mention} spoke today.", "gold_qid": gold,
            "image_ref": "img1", **extra}


def test_empty_file_loads_empty(tmp_path):
    assert load_samples(write_lines(tmp_path / "s.jsonl", [])) == []


def test_two_lines_in_file_order(tmp_path):
    path = write_lines(tmp_path / "s.jsonl", [sample_row("b"), sample_row("a", mention="Obama", gold="Q76")])
    samples = load_samples(path)
    assert [s.sample_id for s in samples] == ["b", "a"]
    assert samples[1] == MentionSample("a", "Obama", "Obama spoke today.", "Q76", "img1", None)


def test_duplicate_sample_id_is_named(tmp_path):
    path = write_lines(tmp_path / "s.jsonl", [sample_row("x1"), sample_row("x2"), sample_row("x1")])
    with pytest.raises(DatasetError) as err:
        load_samples(path)
    assert "x1" in str(err.value)
    assert err.value.line == 3


def test_missing_field_names_line_and_field(tmp_path):
    bad = sample_row("x2")
    del bad["mention"]
    path = write_lines(tmp_path / "s.jsonl", [sample_row("x1"), bad])
    with pytest.raises(DatasetError) as err:
        load_samples(path)
    assert (err.value.line, err.value.field) == (2, "mention")


def test_wrong_type_and_bad_json(tmp_path):
    with pytest.raises(DatasetError) as err:
        load_samples(write_lines(tmp_path / "a.jsonl", [sample_row("x", gold=5)]))
    assert err.value.field == "gold_qid"
    with pytest.raises(DatasetError) as err:
        load_samples(write_lines(tmp_path / "b.jsonl", ["{not json"]))
    assert err.value.line == 1


def test_provided_candidates_round_trip(tmp_path):
    row = sample_row("x", provided_candidates=["Q1", "Q2"])
    samples = load_samples(write_lines(tmp_path / "s.jsonl", [row]))
    assert samples[0].provided_candidates == ("Q1", "Q2")
    save_samples(samples, tmp_path / "out.jsonl")
    assert load_samples(tmp_path / "out.jsonl") == samples


def test_entities_round_trip_and_duplicates(tmp_path):
    ents = [EntityRecord("Q1", "Bruce Golding", "person", "Orette Bruce Golding is a former Jamaican politician.",
                         "static"),
            EntityRecord("Q2", "William Golding", "person", "", "property")]
    save_entities(ents, tmp_path / "e.jsonl")
    assert load_entities(tmp_path / "e.jsonl") == ents
    rows = [json.loads(line) for line in (tmp_path / "e.jsonl").read_text().splitlines()]
    with pytest.raises(DatasetError, match="Q1"):
        load_entities(write_lines(tmp_path / "d.jsonl", rows + rows[:1]))


def test_bad_er_source_rejected():
    with pytest.raises((DatasetError, ValueError)):
        EntityRecord("Q1", "A", "person", "text", "wiki")


ENTS = [EntityRecord("Q1", "Alpha", "person", "Alpha is a person.", "static"),
        EntityRecord("Q2", "Beta", "person", "", "static")]


def test_validate_clean_dataset_has_no_issues():
    report = validate_dataset([MentionSample("s1", "Alpha", "Alpha here", "Q1")], ENTS[:1])
    assert report.ok and report.counts == {"missing_gold": 0, "empty_er": 0, "empty_mentions": 0}


def test_validate_flags_missing_gold_and_empty_er():
    samples = [MentionSample("s1", "Alpha", "Alpha here", "Q1"), MentionSample("s2", "Gamma", "Gamma", "Q9"),
               MentionSample("s3", "Beta", "Beta", "Q2"), MentionSample("s4", "  ", "blank", "Q1")]
    report = validate_dataset(samples, ENTS)
    assert report.missing_gold == ["s2"]
    assert report.empty_er == ["Q2"]
    assert report.empty_mentions == ["s4"]
    kept_samples, kept_entities = drop_flagged(samples, ENTS, report)
    assert [e.qid for e in kept_entities] == ["Q1"]
    assert [s.sample_id for s in kept_samples] == ["s1", "s4"]


def test_stats_empty():
    assert compute_stats([], []) == DatasetStats(0, 0, 0, 0.0)


def test_stats_hand_count():
    # 4 and 6 tokens; the third record shares the first one's context
    samples = [MentionSample("s1", "Trump", "Trump met Obama today", "Q1", "i1"),
               MentionSample("s2", "Biden", "Biden , Harris and Obama .", "Q2", "i2"),
               MentionSample("s3", "Obama", "Trump met Obama today", "Q3", "i1")]
    assert compute_stats(samples, ENTS) == DatasetStats(samples=2, entities=2, mentions=3, mean_text_len=5.0)


ids = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FFF), min_size=1, max_size=8)
texts = st.text(max_size=30)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(texts, texts, ids, st.none() | ids, st.none() | st.lists(ids, max_size=3)),
                max_size=6))
def test_round_trip_property(tmp_path_factory, rows):
    samples = [MentionSample(f"s{i}", m, t, g, ref, None if pc is None else tuple(pc))
               for i, (m, t, g, ref, pc) in enumerate(rows)]
    path = tmp_path_factory.mktemp("rt") / "s.jsonl"
    save_samples(samples, path)
    assert load_samples(path) == samples
