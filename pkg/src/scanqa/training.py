"""Optimizer, learning-rate schedule, training loop and evaluation reports."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .batching import collate_questions, collate_scenes, prepare_scene
from .dataset import (ANSWER_TYPE_LABELS, ANSWER_TYPES, QUESTION_TYPES, AnswerVocabulary, QARecord,
                      accuracy, build_answer_vocabulary, classify_answer_type, classify_question_type,
                      soft_target)
from .fusion import ABLATION_ALIASES, ABLATIONS, FusionModel, ModelConfig, load_checkpoint, loss, save_checkpoint
from .geometry import PECodebook
from .linguistic import TokenVocabulary, build_vocabulary, tokenize
from .scene import Scene

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr_min: float = 1.0e-8
    lr_max: float = 1.0e-4
    lr_period: int = 2000
    epochs: int = 20
    seed: int = 0
    ablation: str = "full"
    proposal_mode: str = "ground_truth"
    max_k: int = 32
    points_per_object: int = 64
    scene_points: int = 512
    token_vocab_size: int = 4096
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ablation = ABLATION_ALIASES.get(self.ablation, self.ablation)
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")
        if self.lr_min > self.lr_max:
            raise ConfigurationError("lr_min must not exceed lr_max")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr_period < 2:
            raise ConfigurationError("lr_period must be >= 2")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


def cyclical_lr(step: int, config: TrainConfig) -> float:
    """Triangular cycle: lr_min at multiples of the period, lr_max half-way through."""
    half = config.lr_period / 2
    phase = (step % config.lr_period) / half
    frac = phase if phase <= 1 else 2 - phase
    return config.lr_min + (config.lr_max - config.lr_min) * frac


# ---------------------------------------------------------------------------
# AdamW

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(name: str, param: torch.Tensor) -> bool:
    # matrices and embedding tables only; biases, norms and embedding scales are exempt
    return param.dim() >= 2 and name != "scales"


@torch.no_grad()
def adamw_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
               state: AdamState, config: TrainConfig, step: int) -> float:
    """One decoupled-weight-decay Adam update in place; returns the learning rate used."""
    lr = cyclical_lr(step, config)
    t = step + 1
    bc1 = 1 - config.beta1 ** t
    bc2 = 1 - config.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(config.beta1).add_(g, alpha=1 - config.beta1)
        v.mul_(config.beta2).addcmul_(g, g, value=1 - config.beta2)
        if config.weight_decay and decays(name, p):
            p.mul_(1 - lr * config.weight_decay)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + config.eps))
    return lr


# ---------------------------------------------------------------------------
# data

@dataclass
class Example:
    record: QARecord
    tokens: object
    target: np.ndarray | None


class SceneCache:
    """Scene tensors keyed by scene id, prepared lazily and reused across epochs."""

    def __init__(self, scenes: Mapping[str, Scene], codebook: PECodebook, config: TrainConfig):
        self.scenes = scenes
        self.codebook = codebook
        self.config = config
        self._items: dict[str, object] = {}

    def __getitem__(self, scene_id: str):
        if scene_id not in self._items:
            if scene_id not in self.scenes:
                raise ConfigurationError(f"no scene loaded for scene_id {scene_id!r}")
            c = self.config
            self._items[scene_id] = prepare_scene(
                self.scenes[scene_id], self.codebook, mode=c.proposal_mode, max_k=c.max_k,
                points_per_object=c.points_per_object, scene_points=c.scene_points)
        return self._items[scene_id]


@dataclass
class TrainResult:
    model: FusionModel
    token_vocab: TokenVocabulary
    answer_vocab: AnswerVocabulary
    config: TrainConfig
    losses: list[float]
    step_losses: list[float]

    def save(self, directory) -> None:
        directory = Path(directory)
        save_checkpoint(self.model, directory, {"train": asdict(self.config), "losses": self.losses})
        self.token_vocab.save(directory / "tokens.txt")
        self.answer_vocab.save(directory / "answers.txt")


def load_trained(directory) -> TrainResult:
    directory = Path(directory)
    model, meta = load_checkpoint(directory)
    return TrainResult(model, TokenVocabulary.load(directory / "tokens.txt"),
                       AnswerVocabulary.load(directory / "answers.txt"),
                       TrainConfig.from_dict(meta.get("train", {})), meta.get("losses", []), [])


def _model_config(config: TrainConfig, vocab_size: int, n_answers: int) -> ModelConfig:
    opts = dict(config.model)
    opts.update(vocab_size=vocab_size, n_answers=n_answers, ablation=config.ablation)
    return ModelConfig.from_dict(opts)


def _batches(model: FusionModel, examples: Sequence[Example], scene_items, token_vocab, use_scenes: bool):
    questions = collate_questions([e.tokens for e in examples], token_vocab)
    scenes = collate_scenes([scene_items[e.record.scene_id] for e in examples], model.dtype) if use_scenes else None
    return questions, scenes


def train(records: Sequence[QARecord], scenes: Mapping[str, Scene], config: TrainConfig,
          token_vocab: TokenVocabulary | None = None, answer_vocab: AnswerVocabulary | None = None,
          init_from: Mapping[str, torch.Tensor] | None = None) -> TrainResult:
    """Train on the train and val splits; the answer vocabulary comes from train alone.

    Under a fixed seed the run is deterministic: shuffling uses a seeded numpy
    generator and parameters are initialized from a seeded torch generator.
    ``init_from`` overrides matching parameters (e.g. a pretrained appearance encoder).
    """
    if answer_vocab is None:
        answer_vocab = build_answer_vocabulary(records)
    if len(answer_vocab) == 0:
        raise ConfigurationError("answer vocabulary is empty")
    used = [r for r in records if r.split in ("train", "val")]
    if token_vocab is None:
        token_vocab = build_vocabulary([r.question for r in used], config.token_vocab_size)

    examples = []
    for r in used:
        target = soft_target(r, answer_vocab)
        if target is not None:
            examples.append(Example(r, tokenize(r.question, token_vocab), target))
    if not examples:
        raise ConfigurationError("no training question has an in-vocabulary answer")

    torch.manual_seed(config.seed)
    mcfg = _model_config(config, len(token_vocab), len(answer_vocab))
    model = FusionModel(mcfg)
    if init_from:
        with torch.no_grad():
            own = dict(model.named_parameters())
            for name, value in init_from.items():
                if name in own and own[name].shape == value.shape:
                    own[name].copy_(value)
    use_scenes = config.ablation != "qonly"
    cache = SceneCache(scenes, PECodebook(mcfg.pe_d_model, mcfg.pe_base), config) if use_scenes else None

    params = dict(model.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    step = 0
    epoch_losses, step_losses = [], []
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            questions, scene_batch = _batches(model, batch, cache, token_vocab, use_scenes)
            target = torch.as_tensor(np.stack([e.target for e in batch]), dtype=model.dtype)
            model.zero_grad(set_to_none=True)
            value = loss(model(questions, scene_batch), target)
            value.backward()
            adamw_step(params, {n: p.grad for n, p in params.items()}, state, config, step)
            step += 1
            step_losses.append(value.item())
            total += step_losses[-1] * len(batch)
            count += len(batch)
        epoch_losses.append(total / count)
        log.info("epoch %d/%d loss %.4f", epoch + 1, config.epochs, epoch_losses[-1])
    model.eval()
    return TrainResult(model, token_vocab, answer_vocab, config, epoch_losses, step_losses)


# ---------------------------------------------------------------------------
# evaluation

REPORT_COLUMNS = ("All", "Number", "Color", "Y/N", "Other") + QUESTION_TYPES


@dataclass
class EvalReport:
    overall: float | None
    count: int
    answer_type: dict[str, float | None]
    answer_type_counts: dict[str, int]
    question_type: dict[str, float | None]
    question_type_counts: dict[str, int]
    predictions: dict[str, str] = field(default_factory=dict)
    scores: dict[str, float] = field(default_factory=dict)

    @property
    def undefined(self) -> list[str]:
        cells = [("All", self.overall)] + list(self.answer_type.items()) + list(self.question_type.items())
        return [name for name, v in cells if v is None]

    def column(self, name: str) -> float | None:
        if name == "All":
            return self.overall
        if name in self.answer_type:
            return self.answer_type[name]
        return self.question_type[name]

    def column_count(self, name: str) -> int:
        if name == "All":
            return self.count
        if name in self.answer_type_counts:
            return self.answer_type_counts[name]
        return self.question_type_counts[name]

    def to_dict(self, with_predictions: bool = False) -> dict:
        d = {
            "overall": self.overall, "count": self.count,
            "answer_type": self.answer_type, "answer_type_counts": self.answer_type_counts,
            "question_type": self.question_type, "question_type_counts": self.question_type_counts,
            "undefined": self.undefined,
        }
        if with_predictions:
            d["predictions"] = self.predictions
            d["scores"] = self.scores
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["overall"], d["count"], d["answer_type"], d["answer_type_counts"],
                   d["question_type"], d["question_type_counts"],
                   d.get("predictions", {}), d.get("scores", {}))


def format_table(rows: Mapping[str, EvalReport]) -> str:
    """Aligned table: overall, answer-type columns, then question-type columns (percent)."""
    name_w = max([len(n) for n in rows] + [6])
    header = " " * name_w + " | " + " ".join(f"{c:>11}" for c in REPORT_COLUMNS)
    lines = [header, "-" * len(header)]
    for name, rep in rows.items():
        cells = []
        for c in REPORT_COLUMNS:
            v = rep.column(c)
            cells.append(f"{'n/a':>11}" if v is None else f"{100 * v:>11.2f}")
        lines.append(f"{name:<{name_w}} | " + " ".join(cells))
    counts = next(iter(rows.values())) if rows else None
    if counts is not None:
        lines.append(f"{'n':<{name_w}} | " + " ".join(f"{counts.column_count(c):>11d}" for c in REPORT_COLUMNS))
    return "\n".join(lines)


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def build_report(records: Sequence[QARecord], predictions: Mapping[str, str]) -> EvalReport:
    scores = {r.question_id: accuracy(predictions[r.question_id], r) for r in records}
    by_answer: dict[str, list[float]] = {ANSWER_TYPE_LABELS[t]: [] for t in ANSWER_TYPES}
    by_question: dict[str, list[float]] = {t: [] for t in QUESTION_TYPES}
    for r in records:
        s = scores[r.question_id]
        by_answer[ANSWER_TYPE_LABELS[classify_answer_type(r)]].append(s)
        qt = classify_question_type(r.question)
        if qt is not None:
            by_question[qt].append(s)
    return EvalReport(
        overall=_mean(list(scores.values())),
        count=len(records),
        answer_type={k: _mean(v) for k, v in by_answer.items()},
        answer_type_counts={k: len(v) for k, v in by_answer.items()},
        question_type={k: _mean(v) for k, v in by_question.items()},
        question_type_counts={k: len(v) for k, v in by_question.items()},
        predictions=dict(predictions),
        scores=scores,
    )


@torch.no_grad()
def predict(result: TrainResult, records: Sequence[QARecord], scenes: Mapping[str, Scene],
            batch_size: int = 256) -> dict[str, str]:
    model = result.model
    model.eval()
    use_scenes = model.config.ablation != "qonly"
    cache = SceneCache(scenes, PECodebook(model.config.pe_d_model, model.config.pe_base),
                       result.config) if use_scenes else None
    out = {}
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        examples = [Example(r, tokenize(r.question, result.token_vocab), None) for r in chunk]
        questions, scene_batch = _batches(model, examples, cache, result.token_vocab, use_scenes)
        best = model(questions, scene_batch).argmax(dim=-1).tolist()
        for r, i in zip(chunk, best):
            out[r.question_id] = result.answer_vocab.answers[i]
    return out


def evaluate(result: TrainResult, records: Sequence[QARecord], scenes: Mapping[str, Scene]) -> EvalReport:
    """Argmax prediction per question, scored with the agreement accuracy and split by type."""
    return build_report(records, predict(result, records, scenes) if records else {})


def write_report(report: EvalReport, path, name: str = "model") -> None:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(with_predictions=True), indent=2, sort_keys=True) + "\n")
    path.with_suffix(".txt").write_text(format_table({name: report}) + "\n")
