"""``scanqa`` command line entry point.

Exit codes: 0 success, 1 validation error (bad input, bad config, unknown
subcommand), 2 I/O error. ``--json`` switches stdout to machine-readable output.
Log level comes from the SCANQA_LOG environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .appearance import color_qa_to_records, generate_color_qa
from .benchmark import GenerationError, SyntheticSceneSpec, generate_synthetic_benchmark
from .dataset import (ANSWER_TYPE_LABELS, QARecord, accuracy, build_answer_vocabulary, classify_answer_type,
                      classify_question_type, correct_answers, load_lexicon, read_jsonl,
                      reject_easy_question, QuestionTypeLexicon)
from .geometry import dump_proposals, propose_objects
from .linguistic import build_vocabulary
from .scene import export_ply, load_ply
from .training import (EvalReport, TrainConfig, TrainingError, evaluate, format_table, load_trained, train,
                       write_report)

log = logging.getLogger("scanqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> dict:
    """Read a ``.json`` object or a key=value text file (``#`` comments, blank lines ignored).

    Dotted keys nest, so ``model.d_hidden = 32`` sets ``{"model": {"d_hidden": 32}}``.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return data
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        _set_dotted(out, key, _parse_value(value))
    return out


def _set_dotted(d: dict, key: str, value) -> None:
    *parents, leaf = key.split(".")
    for p in parents:
        d = d.setdefault(p, {})
    d[leaf] = value


def _overrides(pairs) -> dict:
    out: dict = {}
    for item in pairs or ():
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_dotted(out, key.strip(), _parse_value(value.strip()))
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# ---------------------------------------------------------------------------
# helpers

def _emit(args, payload, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text if text is not None else payload)


def _load_scenes(directory, scene_ids=None) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory not found: {directory}")
    scenes = {}
    for path in sorted(directory.glob("*.ply")):
        if scene_ids is not None and path.stem not in scene_ids:
            continue
        s = load_ply(path)
        scenes[s.scene_id] = s
    return scenes


def _load_record(path, question_id=None) -> QARecord:
    path = Path(path)
    if path.suffix == ".jsonl":
        records = read_jsonl(path)
        if question_id is None:
            if len(records) != 1:
                raise ValueError(f"{path} holds {len(records)} records; pick one with --question-id")
            return records[0]
        for r in records:
            if r.question_id == question_id:
                return r
        raise ValueError(f"question {question_id!r} not found in {path}")
    return QARecord.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else {}
    cfg = _merge(cfg, _overrides(args.set))
    flags = {"ablation": args.ablation, "epochs": args.epochs, "seed": args.seed, "batch_size": args.batch_size,
             "lr_min": args.lr_min, "lr_max": args.lr_max, "lr_period": args.lr_period}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig.from_dict({k: v for k, v in cfg.items() if k in known})


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args) -> int:
    s = load_ply(args.ply)
    info = {"scene_id": s.scene_id, "n_points": s.n_points,
            "extents": [s.extents.X, s.extents.Y, s.extents.Z], "origin": list(s.extents.origin),
            "instances": len(s.instances or ()), "colors_missing": s.colors_missing}
    if args.out:
        export_ply(s, args.out)
        info["written"] = str(args.out)
    text = (f"{s.scene_id}: {s.n_points} points, extents "
            f"{s.extents.X:.4g} x {s.extents.Y:.4g} x {s.extents.Z:.4g}, {info['instances']} instances")
    _emit(args, info, text)
    return 0


def cmd_propose(args) -> int:
    s = load_ply(args.ply)
    props = propose_objects(s, mode=args.mode, max_k=args.max_k, radius=args.radius,
                            iou_threshold=args.iou_threshold)
    text = dump_proposals(s.scene_id, props)
    if args.out:
        Path(args.out).write_text(text)
    if args.json:
        print(text, end="")
    else:
        for p in props:
            lo, hi = p.box.lo, p.box.hi
            print(f"{p.score:.3f}  [{lo[0]:.3f} {lo[1]:.3f} {lo[2]:.3f}] - [{hi[0]:.3f} {hi[1]:.3f} {hi[2]:.3f}]"
                  f"  {len(p.point_indices)} points" + (f"  {p.class_name}" if p.class_name else ""))
    return 0


def cmd_gen_color_qa(args) -> int:
    from .dataset import write_jsonl

    records = []
    for path in args.ply:
        records.extend(color_qa_to_records(generate_color_qa(load_ply(path)), args.annotators, args.split))
    write_jsonl(records, args.out)
    _emit(args, {"records": len(records), "out": str(args.out)}, f"{len(records)} color questions -> {args.out}")
    return 0


def cmd_gen_bench(args) -> int:
    opts = load_config(args.config) if args.config else {}
    opts = _merge(opts, _overrides(args.set))
    opts["seed"] = args.seed if args.seed is not None else opts.get("seed", 7)
    known = {f.name for f in fields(SyntheticSceneSpec)}
    unknown = set(opts) - known
    if unknown:
        raise ValueError(f"unknown benchmark options {sorted(unknown)}")
    spec = SyntheticSceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in opts.items()})
    bench = generate_synthetic_benchmark(spec, args.scenes)
    bench.save(args.out)
    _emit(args, {"scenes": len(bench.scenes), "questions": len(bench.records), "out": str(args.out)},
          f"{len(bench.scenes)} scenes, {len(bench.records)} questions -> {args.out}")
    return 0


def cmd_build_token_vocab(args) -> int:
    records = read_jsonl(args.dataset)
    vocab = build_vocabulary([r.question for r in records if r.split in ("train", "val")], args.max_size)
    vocab.save(args.out)
    _emit(args, {"size": len(vocab), "out": str(args.out)}, f"{len(vocab)} tokens -> {args.out}")
    return 0


def cmd_build_vocab(args) -> int:
    vocab = build_answer_vocabulary(read_jsonl(args.dataset))
    vocab.save(args.out)
    _emit(args, {"size": len(vocab), "answers": vocab.answers, "out": str(args.out)},
          f"{len(vocab)} answers -> {args.out}")
    return 0


def cmd_check_question(args) -> int:
    objects = load_lexicon(args.objects) if args.objects else None
    scenes = load_lexicon(args.scene_types) if args.scene_types else None
    reason = reject_easy_question(args.question, objects, scenes)
    _emit(args, {"question": args.question, "rejected": reason is not None, "reason": reason},
          f"rejected: {reason}" if reason else "accepted")
    return 0


def cmd_classify(args) -> int:
    lexicon = QuestionTypeLexicon.default()
    if args.dataset:
        rows = []
        for r in read_jsonl(args.dataset):
            rows.append({"question_id": r.question_id, "question_type": classify_question_type(r.question, lexicon),
                         "answer_type": ANSWER_TYPE_LABELS[classify_answer_type(r)]})
        if args.json:
            for row in rows:
                print(json.dumps(row, sort_keys=True))
        else:
            for row in rows:
                print(f"{row['question_id']}\t{row['question_type'] or '-'}\t{row['answer_type']}")
        return 0
    if args.question is None:
        raise UsageError("classify needs a question or --dataset")
    qtype = classify_question_type(args.question, lexicon)
    _emit(args, {"question": args.question, "question_type": qtype}, qtype or "none")
    return 0


def cmd_metric(args) -> int:
    record = _load_record(args.record, args.question_id)
    value = accuracy(args.answer, record)
    _emit(args, {"question_id": record.question_id, "answer": args.answer, "accuracy": value,
                 "correct_answers": sorted(correct_answers(record))}, f"{value}")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    records = read_jsonl(args.dataset)
    needed = {r.scene_id for r in records if r.split in ("train", "val")}
    scenes = {} if config.ablation == "qonly" else _load_scenes(args.scenes, needed)
    result = train(records, scenes, config)
    result.save(args.out)
    Path(args.out, "losses.json").write_text(json.dumps({"epoch": result.losses}, indent=2) + "\n")
    _emit(args, {"out": str(args.out), "losses": result.losses, "answers": len(result.answer_vocab)},
          f"trained {config.ablation} for {config.epochs} epochs, final loss {result.losses[-1]:.4f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    result = load_trained(args.checkpoint)
    records = [r for r in read_jsonl(args.dataset) if args.split == "all" or r.split == args.split]
    scenes = {}
    if result.model.config.ablation != "qonly":
        scenes = _load_scenes(args.scenes, {r.scene_id for r in records})
    report = evaluate(result, records, scenes)
    if args.out:
        write_report(report, args.out, result.config.ablation)
    _emit(args, report.to_dict(), format_table({result.config.ablation: report}))
    return 0


def cmd_report(args) -> int:
    rows = {}
    for path in args.reports:
        rows[Path(path).stem] = EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    _emit(args, {k: v.to_dict() for k, v in rows.items()}, format_table(rows))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    p = _Parser(prog="scanqa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="load and validate a PLY scene")
    s.add_argument("ply")
    s.add_argument("--validate", action="store_true", help="validate only (the default behaviour)")
    s.add_argument("--out", help="re-export as binary PLY")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("propose", parents=[common], help="object proposals for a scene")
    s.add_argument("ply")
    s.add_argument("--mode", default="gt", choices=["gt", "ground_truth", "heur", "heuristic"])
    s.add_argument("--max-k", type=int, default=32)
    s.add_argument("--radius", type=float, default=0.3)
    s.add_argument("--iou-threshold", type=float, default=0.25)
    s.add_argument("--out")
    s.set_defaults(func=cmd_propose)

    s = sub.add_parser("gen-color-qa", parents=[common], help="color questions from annotated scenes")
    s.add_argument("ply", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--annotators", type=int, default=2)
    s.add_argument("--split", default="train", choices=["train", "val", "test"])
    s.set_defaults(func=cmd_gen_color_qa)

    s = sub.add_parser("gen-bench", parents=[common], help="synthetic benchmark scenes and questions")
    s.add_argument("--scenes", type=int, default=200)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="bench")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_gen_bench)

    s = sub.add_parser("build-token-vocab", parents=[common], help="subword vocabulary from questions")
    s.add_argument("dataset")
    s.add_argument("--max-size", type=int, default=4096)
    s.add_argument("--out", default="tokens.txt")
    s.set_defaults(func=cmd_build_token_vocab)

    s = sub.add_parser("build-vocab", parents=[common], help="answer vocabulary from the train split")
    s.add_argument("dataset")
    s.add_argument("--out", default="answers.txt")
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("check-question", parents=[common], help="apply the easy-question patterns")
    s.add_argument("question")
    s.add_argument("--objects", help="known object classes, one per line")
    s.add_argument("--scene-types", help="known scene types, one per line")
    s.set_defaults(func=cmd_check_question)

    s = sub.add_parser("classify", parents=[common], help="question type of a question or a dataset")
    s.add_argument("question", nargs="?")
    s.add_argument("--dataset")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("metric", parents=[common], help="agreement accuracy of an answer")
    s.add_argument("--answer", required=True)
    s.add_argument("--record", required=True, help="record .json, or .jsonl with --question-id")
    s.add_argument("--question-id")
    s.set_defaults(func=cmd_metric)

    s = sub.add_parser("train", parents=[common], help="train the fusion model")
    s.add_argument("--dataset", required=True)
    s.add_argument("--scenes", default="scenes")
    s.add_argument("--out", default="checkpoint")
    s.add_argument("--config", help=".json or key=value file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--ablation", choices=["full", "qonly", "geo_q", "app_q", "no_spa", "one_element",
                                          "no_spa_embedding", "one_element_for_all"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr-min", type=float)
    s.add_argument("--lr-max", type=float)
    s.add_argument("--lr-period", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--scenes", default="scenes")
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--out", help="write report JSON (plus a .txt table)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="tabulate saved evaluation reports")
    s.add_argument("reports", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def _setup_logging() -> None:
    level = os.environ.get("SCANQA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"scanqa: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"scanqa: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TrainingError, GenerationError) as exc:
        print(f"scanqa: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
