"""Command-line entry point: ``mbe <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical divergence during training.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mbe import kg
from mbe.agent import Query, TrainConfig, TrainingDiverged, beam_answer, format_trajectory, train, working_graph
from mbe.config import ConfigError, RunConfig, load_config
from mbe.dataset import BuildError, build_mbe, load_dataset, validate_mbe, write_dataset
from mbe.encoder import compute_attention, export_attention
from mbe.evaluation import evaluate, format_table, write_report
from mbe.kg import DataError
from mbe.numerics import checkpoint
from mbe.numerics.checkpoint import CheckpointError
from mbe.numerics.nn import ParamSet
from mbe.numerics.tensor import Tensor
from mbe.planted import make_planted
from mbe.rules import RuleStore, export_rules, import_rules

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
CHECKPOINT_KIND = "mbe-model"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ensure_parent(path: str | Path) -> Path:
    path = Path(path)
    path.resolve().parent.mkdir(parents=True, exist_ok=True)
    return path


def _log_to(path: str | None):
    fh = open(_ensure_parent(path), "a", encoding="utf-8") if path else sys.stderr

    def log(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
    return log


def _write_config_used(cfg: RunConfig, where: Path) -> None:
    where.mkdir(parents=True, exist_ok=True)
    (where / "config_used.json").write_text(cfg.dumps(), encoding="utf-8")


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed).resolved()
    return cfg


def _require_dir(parser, path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        parser.error(f"{what} {path!r} is not a directory")
    return p


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path: str | Path, params: ParamSet, tcfg: TrainConfig, vocab: kg.Vocabulary,
               rules: RuleStore, extra: dict | None = None) -> str:
    meta = {
        "kind": CHECKPOINT_KIND,
        "train_config": tcfg.to_dict(),
        "relations": [vocab.relation_label(r) for r in range(vocab.n_base_relations)],
        "rules": rules.to_json(),
        "rules_frozen": rules.frozen_overlay,
    }
    if extra:
        meta.update(extra)
    Path(path).resolve().parent.mkdir(parents=True, exist_ok=True)
    return checkpoint.save(path, params.arrays(), meta)


def load_model(path: str | Path):
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not a model checkpoint")
    tcfg = TrainConfig.from_dict(meta["train_config"])
    params = ParamSet({k: Tensor(v) for k, v in arrays.items()})
    rules = RuleStore.from_json(meta["rules"])
    rules.frozen_overlay = bool(meta.get("rules_frozen", False))
    return params, tcfg, meta, rules


def _file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_build_dataset(args, parser) -> int:
    cfg = _config(args)
    overrides = {k: v for k, v in (("n_seeds", args.seeds), ("keep_prob", args.keep_prob),
                                   ("num_batches", args.batches)) if v is not None}
    if overrides:
        try:
            cfg = replace(cfg, build=replace(cfg.build, **overrides))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    rows = kg.read_triples(args.source)
    ds = build_mbe([(h, r, t) for h, r, t, _ in rows], cfg.build)
    out = Path(args.out)
    write_dataset(ds, out)
    _write_config_used(cfg, out)
    print(json.dumps(ds.stats(), sort_keys=True))
    return EXIT_OK


def cmd_make_planted(args, parser) -> int:
    cfg = _config(args)
    ds = make_planted(cfg.planted)
    problems = validate_mbe(ds)
    if problems:
        raise DataError("planted dataset failed validation: " + problems[0])
    out = Path(args.out)
    write_dataset(ds, out)
    _write_config_used(cfg, out)
    print(json.dumps(ds.stats(), sort_keys=True))
    return EXIT_OK


def cmd_validate(args, parser) -> int:
    data = _require_dir(parser, args.data, "--data")
    ds = load_dataset(data, strict=False)
    problems = validate_mbe(ds)
    for p in problems:
        print(p)
    return EXIT_DATA if problems else EXIT_OK


def cmd_train(args, parser) -> int:
    data = _require_dir(parser, args.data, "--data")
    cfg = _config(args)
    ds = load_dataset(data)
    problems = validate_mbe(ds)
    if problems:
        raise DataError(f"{data}: dataset invalid ({len(problems)} problems), e.g. {problems[0]}")
    rules = import_rules(args.rules, ds.vocab) if args.rules else None
    log = _log_to(args.log)
    result = train(ds, cfg.train, rules=rules, log=log)
    digest = save_model(args.out, result.params, cfg.train, ds.vocab, result.rules,
                        {"best_epoch": result.best_epoch, "seed": cfg.seed})
    _write_config_used(cfg, Path(args.out).resolve().parent)
    log({"event": "done", "best_epoch": result.best_epoch, "checkpoint_sha256": digest})
    return EXIT_OK


def _model_and_data(args, parser):
    data = _require_dir(parser, args.data, "--data")
    params, tcfg, meta, rules = load_model(args.ckpt)
    ds = load_dataset(data, relations=meta["relations"])
    return params, tcfg, meta, rules, ds


def cmd_answer(args, parser) -> int:
    params, tcfg, meta, rules, ds = _model_and_data(args, parser)
    if not 0 <= args.batch <= ds.num_batches:
        raise DataError(f"batch {args.batch} out of range 0..{ds.num_batches}")
    parts = args.query.split("\t")
    if len(parts) != 2:
        parser.error("--query must be 'head<TAB>relation'")
    head, rel = parts
    if not ds.vocab.has_entity(head):
        raise DataError(f"unknown source entity {head!r}")
    try:
        rid = ds.vocab.relation_id(rel)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    work = working_graph(ds.snapshot(args.batch), rules, tcfg)
    q = Query(ds.vocab.entity_id(head), rid)
    if not work.snapshot.has_entity(q.source):
        raise DataError(f"entity {head!r} is not visible at batch {args.batch}")
    res = beam_answer(work, params, q, args.beam, tcfg, keep_trajectories=args.show_trajectories)
    ranked = sorted(res.scores.items(), key=lambda kv: (-kv[1], kv[0]))[:args.top]
    for e, s in ranked:
        print(f"{ds.vocab.entity_label(e)}\t{float(np.exp(s)):.6g}")
    for rels, ents, s in res.trajectories:
        print(format_trajectory(ds.vocab, rels, ents, s))
    return EXIT_OK


def cmd_evaluate(args, parser) -> int:
    params, tcfg, meta, rules, ds = _model_and_data(args, parser)
    cfg = _config(args)
    setting = args.setting or cfg.eval.setting
    seed = cfg.seed
    run = evaluate(params, tcfg, ds, rules, setting=setting, seed=seed,
                   batches=[args.batch] if args.batch else None, beam_size=args.beam or cfg.eval.beam_size,
                   workers=args.workers)
    print(format_table(run))
    if args.out:
        _ensure_parent(args.out)
        echo = cfg.to_dict()
        echo["eval"]["setting"] = setting
        write_report(run, args.out, {"run": echo, "train": tcfg.to_dict()}, _file_sha256(args.ckpt))
        _write_config_used(replace(cfg, eval=replace(cfg.eval, setting=setting)), Path(args.out).resolve().parent)
    return EXIT_OK


def cmd_export_rules(args, parser) -> int:
    params, tcfg, meta, rules = load_model(args.ckpt)
    vocab = kg.Vocabulary.from_relations(meta["relations"])
    export_rules(rules, vocab, _ensure_parent(args.out))
    return EXIT_OK


def cmd_import_rules(args, parser) -> int:
    params, tcfg, meta, _ = load_model(args.ckpt)
    vocab = kg.Vocabulary.from_relations(meta["relations"])
    rules = import_rules(args.rules, vocab)
    extra = {k: v for k, v in meta.items() if k not in ("kind", "train_config", "relations", "rules", "rules_frozen")}
    save_model(args.out, params, tcfg, vocab, rules, extra)
    return EXIT_OK


def cmd_export_attention(args, parser) -> int:
    params, tcfg, meta, rules = load_model(args.ckpt)
    vocab = kg.Vocabulary.from_relations(meta["relations"])
    export_attention(compute_attention(rules, tcfg.epsilon, vocab), vocab, _ensure_parent(args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mbe", description="Inductive reasoning over expanding knowledge graphs.")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="parallel workers for query answering (default: available CPUs)")
    p.add_argument("--seed", type=int, default=None, help="override the configuration seed")
    # the same two options are accepted after the subcommand; SUPPRESS keeps the top-level value otherwise
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = add("build-dataset", help="build an MBE dataset from a triple file")
    s.add_argument("--source", "--input", dest="source", required=True)
    s.add_argument("--seeds", type=int, help="override build.n_seeds")
    s.add_argument("--keep-prob", type=float, help="override build.keep_prob")
    s.add_argument("--batches", type=int, help="override build.num_batches")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_build_dataset)

    s = add("make-planted", help="write the synthetic planted-rule dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_make_planted)

    s = add("validate", help="check dataset invariants")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_validate)

    s = add("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--rules", help="rule file used as a fixed rule store")
    s.add_argument("--log", help="append JSON-line events here instead of stderr")
    s.set_defaults(func=cmd_train)

    s = add("answer", help="answer one query with beam search")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch", type=int, default=0)
    s.add_argument("--query", required=True, help="'head<TAB>relation'")
    s.add_argument("--beam", type=int, default=128)
    s.add_argument("--show-trajectories", type=int, default=0)
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(func=cmd_answer)

    s = add("evaluate", help="filtered ranking on every emerging batch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--setting", choices=["all", "sample100"])
    s.add_argument("--batch", type=int)
    s.add_argument("--beam", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = add("export-rules", help="write the checkpoint's rule store")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_rules)

    s = add("import-rules", help="replace the checkpoint's rule store with a rule file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--rules", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_rules)

    s = add("export-attention", help="write the attention table as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_attention)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            parser.error("--workers must be >= 1")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
        return args.func(args, sub)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"mbe: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"mbe: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, BuildError, CheckpointError, FileNotFoundError, KeyError, IndexError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mbe: {msg}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
