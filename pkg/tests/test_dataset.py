import json
from collections import Counter

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scanqa.dataset import (AnswerSubmission, AnswerVocabulary, QARecord, Viewpoint, accuracy,
                            build_answer_vocabulary, canonicalize_answer, classify_answer_type,
                            classify_question_type, correct_answers, read_jsonl, reject_easy_question,
                            schema, soft_target, write_jsonl)

from robot_corpus import ROBOT_CASES


def rec(answers, split="train", qid="q", question="what is it"):
    subs = [AnswerSubmission(t, c, f"a{i}") for i, (t, c) in enumerate(answers)]
    return QARecord(qid, "scene0000_00", question, subs, split)


def random_record(r, k):
    words = ["red", "blue", "chair", "two", "yes", "no", "the table", "An Apple"]
    n = int(r.integers(1, 6))
    subs = []
    for i in range(n):
        vp = Viewpoint(tuple(r.normal(size=3).tolist()), tuple(r.normal(size=3).tolist())) if r.random() < 0.5 else None
        subs.append(AnswerSubmission(str(r.choice(words)), str(r.choice(["yes", "maybe", "no"])), f"ann{i}", vp))
    return QARecord(f"q{k}", f"scene{k:04d}_00", f"question number {k}?", subs, str(r.choice(["train", "val", "test"])))


# -- canonicalization and metric ---------------------------------------

def test_canonicalize():
    assert canonicalize_answer("  The   Red  Chair ") == "red chair"
    assert canonicalize_answer("an apple") == "apple"
    assert canonicalize_answer("theater") == "theater"
    with pytest.raises(ValueError):
        AnswerSubmission("   ", "yes", "a")
    with pytest.raises(ValueError):
        AnswerSubmission("red", "sure", "a")


@pytest.mark.parametrize("k, expected", [(0, 0.0), (1, 0.5), (2, 1.0), (3, 1.0), (10, 1.0)])
def test_accuracy_by_match_count(k, expected):
    r = rec([("red", "yes")] * k + [("blue", "yes")])
    assert accuracy("red", r) == expected


@settings(max_examples=60)
@given(st.integers(0, 12), st.integers(0, 5))
def test_accuracy_monotone(k, others):
    r = rec([("red", "yes")] * k + [("blue", "no")] * others + [("green", "maybe")])
    r_more = rec([("red", "yes")] * (k + 1) + [("blue", "no")] * others + [("green", "maybe")])
    assert accuracy("red", r) <= accuracy("red", r_more)
    assert accuracy("red", r) == min(k / 2, 1)


def test_correct_answers_examples():
    assert correct_answers(rec([("red", "yes"), ("red", "maybe"), ("blue", "yes")])) == {"red"}
    assert correct_answers(rec([("red", "yes"), ("blue", "yes")])) == {"red", "blue"}
    assert correct_answers(rec([("red", "no")])) == {"red"}


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_correct_answers_order_invariant(seed):
    r = np.random.default_rng(seed)
    a = random_record(r, 0)
    shuffled = QARecord(a.question_id, a.scene_id, a.question, [a.answers[i] for i in r.permutation(len(a.answers))])
    assert correct_answers(a) == correct_answers(shuffled)


# -- answer vocabulary --------------------------------------------------

def test_vocabulary_threshold():
    records = [rec([("four", "yes")], qid=f"a{i}") for i in range(4)]
    records += [rec([("three", "yes")], qid=f"b{i}") for i in range(3)]
    v = build_answer_vocabulary(records)
    assert v.answers == ["four"]
    assert "three" not in v


def test_empty_vocabulary_warns(caplog):
    assert len(build_answer_vocabulary([])) == 0
    assert "empty" in caplog.text


def test_vocabulary_matches_recount(rng):
    records = [random_record(rng, k) for k in range(50)]
    counts = Counter()
    for r in records:
        if r.split != "train":
            continue
        sums = {}
        for s in r.answers:
            sums[s.text] = sums.get(s.text, 0.0) + {"yes": 1.0, "maybe": 0.5, "no": 0.0}[s.confidence]
        top = max(sums.values())
        counts.update(a for a, v in sums.items() if v == top)
    expected = sorted((a for a, c in counts.items() if c > 3), key=lambda a: (-counts[a], a))
    assert build_answer_vocabulary(records).answers == expected


class Exploding(QARecord):
    @property
    def answers(self):
        raise AssertionError("val/test answers were read")

    @answers.setter
    def answers(self, value):
        pass


def test_vocabulary_ignores_other_splits():
    records = [rec([("red", "yes")], qid=f"t{i}") for i in range(5)]
    records.append(Exploding("x", "s", "q", [], "test"))
    assert build_answer_vocabulary(records).answers == ["red"]


def test_vocabulary_save_load(tmp_path):
    v = build_answer_vocabulary([rec([("red", "yes"), ("red", "maybe")], qid=f"t{i}") for i in range(5)])
    v.save(tmp_path / "v.tsv")
    back = AnswerVocabulary.load(tmp_path / "v.tsv")
    assert back.answers == v.answers and back.evidence == v.evidence


def test_soft_target():
    v = AnswerVocabulary(["red", "blue"])
    t = soft_target(rec([("red", "yes"), ("red", "yes"), ("blue", "yes")]), v)
    assert t.tolist() == pytest.approx([2 / 3, 1 / 3])
    assert soft_target(rec([("green", "yes")]), v) is None


# -- filters and classifiers --------------------------------------------

@pytest.mark.parametrize("question, label", ROBOT_CASES)
def test_robot_checker_corpus(question, label):
    assert reject_easy_question(question) == label


@settings(max_examples=60)
@given(st.lists(st.sampled_from(["near", "the", "big", "window", "and", "door", "red"]), min_size=3, max_size=8))
def test_robot_checker_respects_guards(tail):
    for prefix, guard in (("is there a chair", 8), ("how many chairs", 9), ("what color is the chair", 6)):
        q = " ".join([prefix] + tail)
        if len(q.split()) >= guard:
            assert reject_easy_question(q) is None


@pytest.mark.parametrize("question, qtype", [
    ("How big is the table?", "spatial"),
    ("Is the desk higher than the average table?", "spatial"),
    ("What is the name of this room?", None),
    ("is the chair taller than the bed", "spatial"),
])
def test_question_type_examples(question, qtype):
    assert classify_question_type(question) == qtype


@pytest.mark.parametrize("answers, label", [
    ([("yes", "yes")], "yes_no"),
    ([("3", "yes")], "number"),
    ([("three", "yes")], "number"),
    ([("red", "yes"), ("maroon", "yes")], "color"),
    ([("red and blue", "yes")], "color"),
    ([("chair", "yes")], "other"),
    ([("yes", "yes"), ("chair", "yes")], "other"),
])
def test_answer_type_examples(answers, label):
    assert classify_answer_type(rec(answers)) == label


# -- serialization ------------------------------------------------------

def test_jsonl_round_trip_and_schema(tmp_path, rng):
    records = [random_record(rng, k) for k in range(100)]
    path = tmp_path / "qa.jsonl"
    write_jsonl(records, path)
    back = read_jsonl(path)
    assert [r.to_dict() for r in back] == [r.to_dict() for r in records]
    s = schema()
    for line in path.read_text().splitlines():
        jsonschema.validate(json.loads(line), s)


def test_jsonl_bad_line_is_reported(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"question_id": "q"}\n')
    with pytest.raises(ValueError, match=":1:"):
        read_jsonl(path)
