"""QA records, the agreement accuracy metric, answer vocabulary and question filters."""

from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

CONFIDENCE_VALUE = {"yes": 1.0, "maybe": 0.5, "no": 0.0}
SPLITS = ("train", "val", "test")
MIN_VOCAB_COUNT = 3  # answers must occur strictly more often than this

_ARTICLES = re.compile(r"^(?:(?:a|an|the)\s+)+")


def canonicalize_answer(text: str) -> str:
    """Lowercase, collapse whitespace, strip leading articles."""
    t = " ".join(text.lower().split())
    return _ARTICLES.sub("", t).strip()


@dataclass(frozen=True)
class Viewpoint:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"position": list(self.position), "look_at": list(self.look_at)}


@dataclass(frozen=True)
class AnswerSubmission:
    text: str
    confidence: str
    annotator_id: str
    viewpoint: Viewpoint | None = None

    def __post_init__(self):
        text = canonicalize_answer(self.text)
        if not text:
            raise ValueError(f"answer {self.text!r} is empty after canonicalization")
        if self.confidence not in CONFIDENCE_VALUE:
            raise ValueError(f"confidence must be one of yes/maybe/no, got {self.confidence!r}")
        object.__setattr__(self, "text", text)

    @property
    def confidence_value(self) -> float:
        return CONFIDENCE_VALUE[self.confidence]


@dataclass
class QARecord:
    question_id: str
    scene_id: str
    question: str
    answers: list[AnswerSubmission]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "scene_id": self.scene_id,
            "question": self.question,
            "answers": [
                {"text": a.text, "confidence": a.confidence, "annotator_id": a.annotator_id,
                 "viewpoint": a.viewpoint.to_dict() if a.viewpoint else None}
                for a in self.answers
            ],
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QARecord":
        answers = []
        for a in d["answers"]:
            vp = a.get("viewpoint")
            answers.append(AnswerSubmission(
                a["text"], a["confidence"], a["annotator_id"],
                Viewpoint(tuple(vp["position"]), tuple(vp["look_at"])) if vp else None,
            ))
        return cls(d["question_id"], d["scene_id"], d["question"], answers, d["split"])


def schema() -> dict:
    return json.loads(resources.files("scanqa.data").joinpath("qarecord.schema.json").read_text())


def write_jsonl(records: Iterable[QARecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[QARecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(QARecord.from_dict(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


# ---------------------------------------------------------------------------
# metric and voting

def accuracy(answer: str, record: QARecord) -> float:
    """min(#annotators giving this answer / 2, 1)."""
    a = canonicalize_answer(answer)
    matches = sum(1 for s in record.answers if s.text == a)
    return min(matches / 2.0, 1.0)


def confidence_sums(record: QARecord) -> dict[str, float]:
    sums: dict[str, float] = defaultdict(float)
    for s in record.answers:
        sums[s.text] += s.confidence_value
    return dict(sums)


def correct_answers(record: QARecord) -> set[str]:
    """All answers tied at the highest summed confidence."""
    sums = confidence_sums(record)
    if not sums:
        return set()
    best = max(sums.values())
    return {a for a, v in sums.items() if v == best}


@dataclass
class AnswerVocabulary:
    answers: list[str]
    evidence: dict[str, tuple[int, float]] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self) -> int:
        return len(self.answers)

    def __contains__(self, answer: str) -> bool:
        return answer in self._index

    def index(self, answer: str) -> int:
        return self._index[answer]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for a in self.answers:
                count, conf = self.evidence.get(a, (0, 0.0))
                fh.write(f"{a}\t{count}\t{conf!r}\n")

    @classmethod
    def load(cls, path) -> "AnswerVocabulary":
        answers, evidence = [], {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            a, count, conf = line.split("\t")
            answers.append(a)
            evidence[a] = (int(count), float(conf))
        return cls(answers, evidence)


def build_answer_vocabulary(records: Sequence[QARecord]) -> AnswerVocabulary:
    """Correct answers of training questions that occur more than three times.

    Records outside the train split are skipped without looking at their answers.
    """
    counts: dict[str, int] = defaultdict(int)
    conf: dict[str, float] = defaultdict(float)
    for r in records:
        if r.split != "train":
            continue
        sums = confidence_sums(r)
        for a in correct_answers(r):
            counts[a] += 1
            conf[a] += sums[a]
    kept = sorted((a for a, c in counts.items() if c > MIN_VOCAB_COUNT), key=lambda a: (-counts[a], a))
    if not kept:
        log.warning("answer vocabulary is empty")
    return AnswerVocabulary(kept, {a: (counts[a], conf[a]) for a in kept})


def soft_target(record: QARecord, vocab: AnswerVocabulary):
    """Per-answer accuracy over the vocabulary, renormalized; None if no answer is in vocabulary."""
    import numpy as np

    t = np.zeros(len(vocab))
    for text in {s.text for s in record.answers}:
        if text in vocab:
            t[vocab.index(text)] = accuracy(text, record)
    total = t.sum()
    return t / total if total > 0 else None


# ---------------------------------------------------------------------------
# lexicons

def _read_lexicon(name: str) -> list[str]:
    text = resources.files("scanqa.data").joinpath(name).read_text(encoding="utf-8")
    return [line.lower() for line in text.split("\n") if line.strip()]


def load_lexicon(path=None, default: str | None = None) -> list[str]:
    if path is None:
        return _read_lexicon(default)
    return [line.lower() for line in Path(path).read_text(encoding="utf-8").split("\n") if line.strip()]


def known_objects() -> list[str]:
    return _read_lexicon("known_objects.txt")


def known_scenes() -> list[str]:
    return _read_lexicon("known_scenes.txt")


def color_lexicon() -> list[str]:
    return _read_lexicon("colors.txt")


QUESTION_TYPES = ("spatial", "compare-avg", "placement", "viewpoint", "aggregation")
_QTYPE_FILES = {
    "spatial": "qtype_spatial.txt",
    "compare-avg": "qtype_compare_avg.txt",
    "placement": "qtype_placement.txt",
    "viewpoint": "qtype_viewpoint.txt",
    "aggregation": "qtype_aggregation.txt",
}


@dataclass(frozen=True)
class QuestionTypeLexicon:
    keywords: dict[str, tuple[str, ...]]

    @classmethod
    def default(cls) -> "QuestionTypeLexicon":
        return cls({t: tuple(_read_lexicon(f)) for t, f in _QTYPE_FILES.items()})


_NON_WORD = re.compile(r"[^a-z0-9']+")


def _padded_words(q: str) -> str:
    return " " + " ".join(_NON_WORD.sub(" ", q.lower()).split()) + " "


def _keyword_in(entry: str, padded: str) -> bool:
    # entries carrying their own edge spaces are matched literally as written
    if entry != entry.strip():
        return entry in padded
    return f" {entry} " in padded


def classify_question_type(q: str, lexicon: QuestionTypeLexicon | None = None) -> str | None:
    """First matching type in the order spatial, compare-avg, placement, viewpoint, aggregation."""
    lexicon = lexicon or QuestionTypeLexicon.default()
    padded = _padded_words(q)
    for qtype in QUESTION_TYPES:
        if any(_keyword_in(k, padded) for k in lexicon.keywords.get(qtype, ())):
            return qtype
    return None


# ---------------------------------------------------------------------------
# robot checker

def _alternation(phrases: Iterable[str]) -> str:
    items = sorted({p.strip().lower() for p in phrases if p.strip()}, key=lambda p: (-len(p), p))
    return "|".join(r"\s+".join(map(re.escape, p.split())) for p in items)


class RobotChecker:
    """Rejects questions a trivial bot could answer.

    Patterns, each with a whitespace-word-count guard:
      existence   Is|Are there a|an|any|some <object> ...      (< 8 words)
      count       How many <object> ...                          (< 9 words)
      color       What color|colour is|are the <object> ...     (< 6 words)
      scene_type  Is it|this [scene|scan|room] a|an <scene> ...  (no guard)
    Object names may carry a plural s/es.
    """

    def __init__(self, objects: Iterable[str] | None = None, scenes: Iterable[str] | None = None):
        obj = _alternation(known_objects() if objects is None else objects) or r"(?!x)x"
        scn = _alternation(known_scenes() if scenes is None else scenes) or r"(?!x)x"
        cls = rf"(?:{obj})(?:s|es)?\b"
        self.patterns = [
            ("existence", re.compile(rf"^(?:is|are)\s+there\s+(?:a|an|any|some)\s+{cls}"), 8),
            ("count", re.compile(rf"^how\s+many\s+{cls}"), 9),
            ("color", re.compile(rf"^what\s+(?:color|colour)\s+(?:is|are)\s+the\s+{cls}"), 6),
            ("scene_type", re.compile(
                rf"^is\s+(?:it|this)\s+(?:(?:scene|scan|room)\s+)?(?:a|an)\s+(?:{scn})\b"), None),
        ]

    def check(self, q: str) -> str | None:
        n_words = len(q.split())
        text = " ".join(q.lower().split())
        for name, pattern, max_words in self.patterns:
            if max_words is not None and n_words >= max_words:
                continue
            if pattern.match(text):
                return name
        return None


def reject_easy_question(q: str, known_objects: Iterable[str] | None = None,
                         known_scenes: Iterable[str] | None = None) -> str | None:
    return RobotChecker(known_objects, known_scenes).check(q)


# ---------------------------------------------------------------------------
# answer types

NUMBER_WORDS = ("zero one two three four five six seven eight nine ten eleven twelve thirteen "
                "fourteen fifteen sixteen seventeen eighteen nineteen twenty").split()
_INT = re.compile(r"^[+-]?\d+$")
ANSWER_TYPES = ("yes_no", "number", "color", "other")
ANSWER_TYPE_LABELS = {"yes_no": "Y/N", "number": "Number", "color": "Color", "other": "Other"}


def _is_number(a: str) -> bool:
    return bool(_INT.match(a)) or a in NUMBER_WORDS


def _is_color(a: str, colors: frozenset) -> bool:
    # single names, or a conjunction of names as produced by the color corpus
    parts = a.split(" and ")
    return all(p in colors for p in parts)


def classify_answer_type(record: QARecord, colors: Iterable[str] | None = None) -> str:
    answers = correct_answers(record)
    colors = frozenset(color_lexicon() if colors is None else colors)
    if answers and all(a in ("yes", "no") for a in answers):
        return "yes_no"
    if answers and all(_is_number(a) for a in answers):
        return "number"
    if answers and all(_is_color(a, colors) for a in answers):
        return "color"
    return "other"
