"""Command line entry point: ``fusionqa <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import difflib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import cache as cache_mod
from .encoder import HashEncoder, HashEncoderConfig, RemoteEncoder
from .facts import FactStore, load_facts
from .grounding import DataError, read_jsonl
from .kg_store import GraphFormatError, MergeTable, ParseError, build_graph, iter_assertions, load_graph, save_graph
from .model import ConfigError, ModelConfig, choice_probabilities, load_checkpoint, save_checkpoint
from .pipeline import Grounder, NodeTable, WorkingGraphBuilder
from .synthetic import generate_benchmark
from .train import TrainConfig, evaluate, format_table, grid_cells, metrics_line, predict_scores, run_matrix, train

logger = logging.getLogger("fusionqa")

ENCODER_URL_ENV = "FUSIONQA_ENCODER_URL"


class UsageError(Exception):
    pass


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _facts_list(s: str) -> list[bool]:
    if s == "both":
        return [False, True]
    return [_bool(x) for x in s.split(",") if x.strip()]


def _existing(flag: str, path) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: {p} does not exist")
    return p


def read_config_file(path: str) -> dict:
    """``key = value`` lines (``#`` comments); keys use option names with ``_`` or ``-``."""
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_string("[fusionqa]\n" + fh.read())
    return {k.replace("-", "_"): v for k, v in parser["fusionqa"].items()}


# ---------------------------------------------------------------- shared opts

def _add_extract_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", help="binary graph file from preprocess-kg")
    p.add_argument("--cache-dir", help="directory for working-graph caches")
    p.add_argument("--k", type=int, default=2, help="hop radius (= GNN layers)")
    p.add_argument("--max-nodes", type=int, default=200)
    p.add_argument("--facts", type=_bool, default=False, help="fuse knowledge facts (true/false)")
    p.add_argument("--facts-file", help="one fact per line; used when records carry no gold fact")
    p.add_argument("--facts-per-question", type=int, default=1)
    p.add_argument("--token-cap", type=int, default=512)
    p.add_argument("--encoder", default="hash", help="'hash' or 'remote' (URL from --encoder-url or $%s)" % ENCODER_URL_ENV)
    p.add_argument("--encoder-url")
    p.add_argument("--hash-dim", type=int, default=128)
    p.add_argument("--hash-seed", type=int, default=0)


def _add_train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=("qagnn", "baseline"), default="qagnn")
    p.add_argument("--gnn-dim", type=int, default=200)
    p.add_argument("--fc-dim", type=int, default=200)
    p.add_argument("--fc-layers", type=int, default=0)
    p.add_argument("--pooling", choices=("attention", "mean"), default="attention")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adamw", "radam"))
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def _encoder_cfg(args) -> dict:
    if args.encoder == "hash":
        return {"type": "hash", "dim": args.hash_dim, "seed": args.hash_seed}
    url = args.encoder_url or os.environ.get(ENCODER_URL_ENV)
    if args.encoder != "remote" or not url:
        raise UsageError(f"--encoder must be 'hash' or 'remote' with --encoder-url or ${ENCODER_URL_ENV} set")
    return {"type": "remote", "url": url}


def _provider(enc: dict):
    if enc["type"] == "hash":
        return HashEncoder(HashEncoderConfig(dim=enc["dim"], seed=enc["seed"]))
    return RemoteEncoder(enc["url"])


def _extract_cfg(args, graph: Path) -> dict:
    return {
        "k": args.k,
        "max_nodes": args.max_nodes,
        "facts": bool(args.facts),
        "facts_per_question": args.facts_per_question,
        "token_cap": args.token_cap,
        "encoder": _encoder_cfg(args),
        "graph": str(graph.resolve()),
        "graph_sha256": cache_mod.file_digest(graph),
    }


def _split_cfg(base: dict, qa_path: Path, facts_path: Path | None) -> dict:
    cfg = dict(base)
    cfg["qa_sha256"] = cache_mod.file_digest(qa_path)
    cfg["facts_sha256"] = cache_mod.file_digest(facts_path) if facts_path else None
    return cfg


def _parse_qa_specs(specs: list[str]) -> dict[str, Path]:
    out = {}
    for spec in specs or []:
        if "=" not in spec:
            raise UsageError(f"--qa expects split=path, got {spec!r}")
        split, path = spec.split("=", 1)
        out[split] = _existing("--qa", path)
    if not out:
        raise UsageError("--qa is required (split=path, repeatable)")
    return out


# ------------------------------------------------------------------ commands

def cmd_preprocess_kg(args) -> int:
    dump = _existing("--dump", args.dump)
    if args.merge_table == "builtin":
        table = MergeTable.default()
    else:
        table = MergeTable.load(_existing("--merge-table", args.merge_table))
    if args.out is None:
        raise UsageError("--out is required")
    with open(dump, encoding="utf-8") as fh:
        g = build_graph(iter_assertions(fh, strict=args.strict), table, args.max_edges)
    save_graph(g, args.out)
    print(g.stats().report())
    return 0


def _ground_split(args, split: str, qa_path: Path, base_cfg: dict, kg, provider, store, node_table) -> dict:
    facts_path = Path(args.facts_file) if args.facts_file else None
    cfg = _split_cfg(base_cfg, qa_path, facts_path)
    path = cache_mod.cache_path(args.cache_dir, split, cfg)
    if path.exists():
        n = sum(1 for _ in open(path, encoding="utf-8")) - 1
        print(f"split={split} cache hit: {path} records={n}")
        return {"split": split, "path": str(path), "records": n, "hit": True}
    grounder = Grounder(kg, store, facts=cfg["facts"], facts_per_question=cfg["facts_per_question"],
                        token_cap=cfg["token_cap"]).fit()
    builder = WorkingGraphBuilder(kg, provider, k=cfg["k"], max_nodes=cfg["max_nodes"]).fit()
    builder.node_table_ = node_table
    examples, skipped = [], 0
    with open(qa_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                ex = grounder.ground_one(record)
            except (json.JSONDecodeError, DataError) as exc:
                logger.warning("%s:%d skipped: %s", qa_path, lineno, exc)
                skipped += 1
                continue
            graphs = [builder.build_choice(ex, j)[::2] for j in range(len(ex.choices))]
            examples.append((ex, graphs))
    header = dict(cfg, split=split, examples=len(examples))
    n = cache_mod.write_cache(path, header, examples)
    print(f"split={split} examples={len(examples)} records={n} skipped={skipped} cache={path}")
    return {"split": split, "path": str(path), "records": n, "skipped": skipped, "hit": False}


def cmd_ground(args) -> int:
    graph = _existing("--graph", args.graph)
    qa = _parse_qa_specs(args.qa)
    if args.cache_dir is None:
        raise UsageError("--cache-dir is required")
    Path(args.cache_dir).mkdir(parents=True, exist_ok=True)
    store = None
    if args.facts_file:
        store = load_facts(_existing("--facts-file", args.facts_file))
    base = _extract_cfg(args, graph)
    kg = load_graph(graph)
    provider = _provider(base["encoder"])
    table = NodeTable(kg, provider)
    for split, path in qa.items():
        _ground_split(args, split, path, base, kg, provider, store, table)
    return 0


def _load_split(args, split: str, base: dict, kg, provider, table):
    qa_path = _existing(f"--qa ({split})", args.qa_map[split])
    facts_path = Path(args.facts_file) if args.facts_file else None
    cfg = _split_cfg(base, qa_path, facts_path)
    path = cache_mod.find_compatible(Path(args.cache_dir), split, cfg)
    return cache_mod.load_dataset(path, kg, provider, table)


def _configs(args, input_dim: int) -> tuple[ModelConfig, TrainConfig]:
    baseline = args.model == "baseline"
    mcfg = ModelConfig(
        input_dim=input_dim,
        gnn_dim=1 if baseline else args.gnn_dim,
        fc_dim=args.fc_dim,
        gnn_layers=1 if baseline else args.k,
        fc_layers=1 if baseline else args.fc_layers,
        pooling=args.pooling,
        kind=args.model,
        seed=args.seed,
    )
    tcfg = TrainConfig(
        batch_size=args.batch_size or (16 if baseline else 128),
        epochs=args.epochs,
        lr=args.lr or (5e-5 if baseline else 1e-4),
        optimizer=args.optimizer or ("adamw" if baseline else "radam"),
        weight_decay=args.weight_decay,
        clip_norm=args.clip_norm,
        seed=args.seed,
        facts=bool(args.facts),
        k=args.k,
        fc_layers=mcfg.fc_layers,
    )
    return mcfg, tcfg


def _train_from_args(args, out_dir: Path) -> dict:
    if args.epochs is not None and args.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    graph = _existing("--graph", args.graph)
    args.qa_map = {k: str(v) for k, v in _parse_qa_specs(args.qa).items()}
    for split in ("train", "dev"):
        if split not in args.qa_map:
            raise UsageError(f"--qa {split}=<path> is required")
    base = _extract_cfg(args, graph)
    kg = load_graph(graph)
    provider = _provider(base["encoder"])
    table = NodeTable(kg, provider)
    data = {s: _load_split(args, s, base, kg, provider, table) for s in args.qa_map}
    mcfg, tcfg = _configs(args, data["train"].input_dim)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    tmp = metrics_path.with_suffix(".jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        def on_epoch(rec):
            fh.write(metrics_line(rec) + "\n")
            fh.flush()
        params, run = train(data["train"], data["dev"], mcfg, tcfg, data.get("test"), on_epoch)
    tmp.replace(metrics_path)
    extra = {"extract": {k: v for k, v in base.items()}, "train": asdict(tcfg),
             "best_epoch": run.best_epoch, "best_dev": run.best_dev, "test_acc": run.test_acc}
    save_checkpoint(params, mcfg, out_dir / "model.ckpt", extra)
    summary = {"best_epoch": run.best_epoch, "dev": run.best_dev, "test": run.test_acc,
               "checkpoint": str(out_dir / "model.ckpt"), "metrics": str(metrics_path)}
    return summary


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    summary = _train_from_args(args, Path(args.out))
    print(json.dumps(summary, sort_keys=True))
    return 0


def _dataset_for_checkpoint(extra: dict, cache_dir: Path, split: str, qa_path: str | None, facts_file: str | None):
    ext = dict(extra["extract"])
    kg = load_graph(ext["graph"])
    provider = _provider(ext["encoder"])
    table = NodeTable(kg, provider)
    if qa_path is not None:
        cfg = _split_cfg(ext, Path(qa_path), Path(facts_file) if facts_file else None)
        path = cache_mod.find_compatible(cache_dir, split, cfg)
    else:
        matches = [p for p in sorted(cache_dir.glob(f"{split}-*.jsonl"))
                   if all(cache_mod.read_header(p).get(f) == ext.get(f) for f in cache_mod.COMPAT_FIELDS)]
        if not matches:
            raise ConfigError(f"no {split!r} cache in {cache_dir} matches the checkpoint's extraction config")
        path = matches[0]
    return cache_mod.load_dataset(path, kg, provider, table), kg


def cmd_eval(args) -> int:
    ckpt = _existing("--checkpoint", args.checkpoint)
    cache_dir = _existing("--cache-dir", args.cache_dir)
    params, mcfg, extra = load_checkpoint(ckpt)
    ds, _ = _dataset_for_checkpoint(extra, cache_dir, args.split, args.qa, args.facts_file)
    acc = evaluate(params, ds, mcfg)
    print(f"accuracy={acc:.6f}")
    return 0


def cmd_matrix(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    cells = grid_cells(_int_list(args.ks), _int_list(args.fcs), _facts_list(args.facts_grid), args.seed)
    graph = _existing("--graph", args.graph)
    qa = _parse_qa_specs(args.qa)
    store = load_facts(_existing("--facts-file", args.facts_file)) if args.facts_file else None
    kg = load_graph(graph)

    def run_cell(cell):
        cell_args = argparse.Namespace(**vars(args))
        cell_args.k, cell_args.fc_layers, cell_args.facts, cell_args.seed = cell.k, cell.fc_layers, cell.facts, cell.seed
        base = _extract_cfg(cell_args, graph)
        provider = _provider(base["encoder"])
        table = NodeTable(kg, provider)
        for split, path in qa.items():
            _ground_split(cell_args, split, path, base, kg, provider, store, table)
        cell_dir = out / f"{'facts' if cell.facts else 'plain'}-k{cell.k}-fc{cell.fc_layers}"
        cell_args.qa = [f"{s}={p}" for s, p in qa.items()]
        summary = _train_from_args(cell_args, cell_dir)
        from .train import TrainRun
        return TrainRun(config={}, best_epoch=summary["best_epoch"], best_dev=summary["dev"], test_acc=summary["test"])

    rows = run_matrix(cells, run_cell)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(rows)
    (out / "results.tsv").write_text(table, encoding="utf-8")
    (out / "cells.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    sys.stdout.write(table)
    return 1 if any(r["error"] for r in rows) else 0


def inspect_report(example_id: str, sides: list[tuple[str, dict, list[dict], np.ndarray]], kg) -> str:
    """Text deep-dive. ``sides`` holds (name, header, cache records, probabilities)."""
    name0, header0, recs0, _ = sides[0]
    first = recs0[0]
    gold = first["label"]
    labels = [r["choice_label"] for r in recs0]
    lines = [f"== example {example_id}", "", "[stem]", first["stem"], "", "[choices]"]
    for r in recs0:
        mark = " (gold)" if r["choice_index"] == gold else ""
        lines.append(f"  {r['choice_label']}. {r['choice_text']}{mark}")
    lines += ["", "[retrieved facts]"]
    core = first["stem"] + " / " + first["choice_text"]
    facts_side = next((s for s in sides if s[1].get("facts")), None)
    if facts_side is None:
        lines.append("  (none: neither checkpoint uses facts)")
    else:
        ctx = facts_side[2][0]["context_text"]
        lines.append("  " + (ctx[: len(ctx) - len(core)].rstrip(" /") or "(none)"))
    for name, header, recs, _ in sides:
        lines += ["", f"[grounded concepts: {name}]"]
        for r in recs:
            qn = ", ".join(kg.concepts[i] for i in r["question_concepts"]) or "-"
            an = ", ".join(kg.concepts[i] for i in r["answer_concepts"]) or "-"
            lines.append(f"  {r['choice_label']}: question[{qn}] answer[{an}]")
    for name, header, recs, _ in sides:
        lines += ["", f"[top-10 subgraph nodes by relevance: {name}]"]
        for r in recs:
            g = r["graph"]
            pairs = [(rel, kid) for kid, rel in zip(g["kg_ids"][1:], g["relevance"][1:])]
            pairs.sort(key=lambda t: (-t[0], t[1]))
            top = ", ".join(f"{kg.concepts[kid]}({rel:.3f})" for rel, kid in pairs[:10]) or "-"
            lines.append(f"  {r['choice_label']}: {top}")
    lines += ["", "[choice probabilities]", "  choice\t" + "\t".join(s[0] for s in sides)]
    for j, lab in enumerate(labels):
        lines.append(f"  {lab}\t" + "\t".join(f"{s[3][j]:.4f}" for s in sides))
    lines += ["", "[prediction]"]
    preds = []
    for name, _, _, probs in sides:
        p = int(np.argmax(probs))
        preds.append(p)
        verdict = "correct" if p == gold else "wrong"
        lines.append(f"  {name}: {labels[p]} ({verdict})")
    if len(sides) == 2:
        if preds[0] == preds[1]:
            flip = "no flip"
        else:
            flip = f"flip {labels[preds[1]]} -> {labels[preds[0]]}"
            if preds[0] == gold:
                flip += " (fixed by facts)"
            elif preds[1] == gold:
                flip += " (broken by facts)"
        lines.append(f"  flip status: {flip}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    cache_dir = _existing("--cache-dir", args.cache_dir)
    sides = []
    kg = None
    for name, ckpt in (("facts-on", args.ckpt_facts), ("facts-off", args.ckpt_plain)):
        params, mcfg, extra = load_checkpoint(_existing(f"--ckpt-{'facts' if name == 'facts-on' else 'plain'}", ckpt))
        ds, kg = _dataset_for_checkpoint(extra, cache_dir, args.split, None, None)
        ids = [q.example_id for q in ds.questions]
        if args.id not in ids:
            near = difflib.get_close_matches(args.id, ids, n=5, cutoff=0.0)
            raise DataError(f"unknown example id {args.id!r}; nearest: {', '.join(near)}")
        i = ids.index(args.id)
        probs = choice_probabilities(predict_scores(params, ds[[i]], mcfg))[0]
        path = next(p for p in sorted(cache_dir.glob(f"{args.split}-*.jsonl"))
                    if all(cache_mod.read_header(p).get(f) == extra["extract"].get(f) for f in cache_mod.COMPAT_FIELDS))
        header, records = cache_mod.read_records(path)
        recs = sorted((r for r in records if r["example_id"] == args.id), key=lambda r: r["choice_index"])
        sides.append((name, header, recs, probs))
    report = inspect_report(args.id, sides, kg)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


def cmd_synth(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    bench = generate_benchmark(args.questions, args.nodes, args.hops, args.avg_degree, args.seed)
    paths = bench.write(args.out)
    for k, v in paths.items():
        print(f"{k}\t{v}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionqa", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value file supplying defaults for any option")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess-kg", help="parse a ConceptNet dump into a binary graph")
    p.add_argument("--dump")
    p.add_argument("--merge-table", required=True, help="merge table path, or 'builtin'")
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed line")
    p.add_argument("--max-edges", type=int, help="abort once this many distinct edges exist")
    p.set_defaults(func=cmd_preprocess_kg)

    p = sub.add_parser("ground", help="ground QA records and cache working graphs")
    _add_extract_opts(p)
    p.add_argument("--qa", action="append", help="split=path to OpenBookQA jsonl (repeatable)")
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("train", help="train on cached working graphs")
    _add_extract_opts(p)
    _add_train_opts(p)
    p.add_argument("--qa", action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a cached split")
    p.add_argument("--checkpoint")
    p.add_argument("--cache-dir")
    p.add_argument("--split", default="test")
    p.add_argument("--qa", help="QA file of the split (pins the exact cache)")
    p.add_argument("--facts-file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run the k x fc x facts experiment grid")
    _add_extract_opts(p)
    _add_train_opts(p)
    p.add_argument("--qa", action="append")
    p.add_argument("--ks", default="2,3,4")
    p.add_argument("--fcs", default="0,1")
    p.add_argument("--facts-grid", default="both", help="'both' or a comma list of true/false")
    p.add_argument("--out")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("inspect", help="text deep-dive of one example under two checkpoints")
    p.add_argument("--id", required=True)
    p.add_argument("--ckpt-facts", required=True)
    p.add_argument("--ckpt-plain", required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write the synthetic multi-hop benchmark")
    p.add_argument("--out")
    p.add_argument("--questions", type=int, default=1000)
    p.add_argument("--nodes", type=int, default=2000)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--avg-degree", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config_file(known.config)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in values.items() if k in dests})


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, configparser.Error) as exc:
        print(f"fusionqa: error: --config: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fusionqa: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, GraphFormatError, ParseError, FloatingPointError, OSError, ValueError) as exc:
        print(f"fusionqa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
