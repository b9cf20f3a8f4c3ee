"""Command-line entry point.

Every command writes ``manifest.json`` into its output directory: the full
argument set, the seed, the model configuration and the metric results.
``--from-manifest`` replays a previous run with the recorded arguments.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import PairDataset, Vocabularies, collate, make_example
from .graph import DEFAULT_NODE_CAP, GraphSchema, RelationVocabulary, read_tables, write_graphs
from .text import encode_text

TASK_DEFAULTS = {
    "retrieval": {"lr": 1e-5, "epochs": 20},
    "temporal": {"lr": 1e-4, "epochs": 20},
    "error": {"lr": 1e-5, "epochs": 20},
    "generation": {"lr": 3e-5, "epochs": 30},
}


class CliError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _out(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(out: Path, args, metrics: dict, config: dict | None = None, extra: dict | None = None):
    record = {"command": args.command, "version": __version__, "seed": getattr(args, "seed", None),
              "args": _args_dict(args), "config": config or {}, "metrics": metrics, **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


def _args_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "from_manifest")}


def _load_data(directory, split: str) -> tuple[PairDataset, dict]:
    d = Path(directory)
    if not (d / f"{split}.jsonl").exists():
        raise CliError(f"dataset split {d / (split + '.jsonl')} not found")
    info = json.loads((d / "dataset.json").read_text()) if (d / "dataset.json").exists() else {}
    return PairDataset.load(d / f"{split}.jsonl", Vocabularies.load(d)), info


def _need_file(path, what: str) -> Path:
    if path is None:
        raise CliError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} {p} does not exist")
    return p


def _model_params(args) -> dict:
    return {"hidden_size": args.hidden_size, "num_heads": args.heads, "text_layers": args.text_layers,
            "graph_layers": args.graph_layers, "cross_layers": args.cross_layers,
            "intermediate_size": args.intermediate_size, "dropout": args.dropout,
            "use_summary": not args.no_summary, "use_init_embedding": args.init_embedding,
            "use_adjacency": not args.no_adjacency}


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    from .synth import SynthSchema, make_dataset
    if args.schema_file:
        schema = SynthSchema.load(_need_file(args.schema_file, "schema file"))
    else:
        schema = SynthSchema.default(args.variant, pool_size=args.pool_size, seed=args.seed,
                                     noise_rate=args.noise, mortality=args.mortality,
                                     readmission=args.readmission, outcome_signal=args.outcome_signal)
    fractions = [float(x) for x in args.fractions.split(",")]
    out = _out(args)
    built = make_dataset(schema, args.n, args.seed, fractions, out, node_cap=args.node_cap)
    metrics = {"pairs": {k: len(v) for k, v in built.splits.items()},
               "dropped": {k: len(v) for k, v in built.dropped.items()},
               "text_vocab": len(built.vocab.text), "graph_vocab": len(built.vocab.graph)}
    write_manifest(out, args, metrics)


def cmd_convert(args):
    from .synth import build_vocabularies, pair_tables
    schema = GraphSchema.load(_need_file(args.schema, "schema"))
    tables_dir = _need_file(args.tables, "tables directory")
    names = list(schema.tables)
    has_notes = (tables_dir / "notes.csv").exists()
    tables = read_tables(tables_dir, names + (["notes"] if has_notes else []))
    out = _out(args)
    from .graph import convert_tables
    graphs = convert_tables(tables, schema)
    write_graphs(graphs, out / "graphs.jsonl")
    metrics = {"graphs": len(graphs), "relations": len(schema.relation_names())}
    if has_notes:
        kept, dropped = pair_tables(tables, schema, node_cap=args.node_cap)
        vocab = build_vocabularies(kept, RelationVocabulary(schema.relation_names()))
        ds = PairDataset([make_example(g, encode_text(s, vocab.text), vocab.graph, y) for g, s, y in kept], vocab)
        vocab.save(out)
        ds.save(out / f"{args.split_name}.jsonl")
        variant = "rx" if "prescriptions" in schema.tables else "dxpx"
        (out / "dataset.json").write_text(json.dumps({"variant": variant, "pairs": {args.split_name: len(ds)}},
                                                     indent=2, sort_keys=True))
        metrics.update(pairs=len(ds), dropped={k: len(v) for k, v in dropped.items()})
    write_manifest(out, args, metrics)


def cmd_pretrain(args):
    from .pretrain import Pretrainer
    from .validation import check_tasks
    train, _ = _load_data(args.data, "train")
    tasks = check_tasks(args.tasks)
    out = _out(args)
    every = args.checkpoint_every

    def cb(est):
        if every and est.epoch_ % every == 0:
            est.save(out / f"pretrain_epoch{est.epoch_}.npz", {"seed": args.seed})

    est = Pretrainer(**_model_params(args), tasks=tasks, lr=args.lr, epochs=args.epochs,
                     batch_size=args.batch_size, mlm_prob=args.mlm_prob, mlp_prob=args.mlp_prob,
                     rc_fraction=args.rc_fraction, p_replace=args.p_replace, rc_balanced=args.rc_balanced,
                     seed=args.seed, init_weights=args.init_weights, callback=cb if every else None)
    est.fit(train)
    est.save(out / "pretrain.npz", {"seed": args.seed})
    _write_jsonl(out / "train_log.jsonl", est.step_log_)
    metrics = {"final": est.history_[-1] if est.history_ else {}}
    if "ap" in tasks:
        metrics["ap_accuracy_train"] = est.alignment_accuracy(train, seed=args.seed)
    write_manifest(out, args, metrics, est.model_.config.to_dict(), {"tasks": tasks})


def _make_finetuner(args, vocab_variant: str):
    from . import downstream as ds
    defaults = TASK_DEFAULTS[args.task]
    lr = defaults["lr"] if args.lr is None else args.lr
    epochs = defaults["epochs"] if args.epochs is None else args.epochs
    pretrained = str(_need_file(args.pretrained, "pretrained checkpoint")) if args.pretrained else None
    common = dict(pretrained=pretrained, model_params=None if pretrained else _model_params(args), lr=lr,
                  epochs=epochs, batch_size=args.batch_size, seed=args.seed)
    if args.task == "retrieval":
        return ds.CrossModalRetriever(**common)
    if args.task == "temporal":
        return ds.TemporalPredictor(label=args.label, **common)
    if args.task == "error":
        return ds.ErrorDetector(corruption=args.corruption, **common)
    gen = ds.GenerationConfig.for_variant(vocab_variant)
    strategy = args.strategy or gen.strategy
    return ds.NoteGenerator(strategy=strategy, top_p=args.top_p, stop_seps=gen.stop_seps,
                            sections=gen.sections, sep_mask_prob=args.sep_mask_prob, **common)


def _estimator_class(task):
    from . import downstream as ds
    return {"retrieval": ds.CrossModalRetriever, "temporal": ds.TemporalPredictor,
            "error": ds.ErrorDetector, "generation": ds.NoteGenerator}[task]


def _evaluate(task, est, data: PairDataset, seed: int, out: Path | None, direction: str = "text"):
    """Metrics plus per-pair prediction records."""
    from .downstream import literal_pools
    records = []
    if task == "retrieval":
        ranks = est.rank(data, direction)
        metrics = est.evaluate(data, direction)
        records = [{"pair": ex.admission_key, "rank": int(r), "direction": direction} for ex, r in zip(data, ranks)]
    elif task == "temporal":
        probs = est.predict_proba(data)[:, 1]
        metrics = est.evaluate(data)
        records = [{"pair": ex.admission_key, "score": float(p), "label": int(ex.labels.get(est.label, 0))}
                   for ex, p in zip(data, probs)]
    elif task == "error":
        if not hasattr(est, "pools_"):
            est.pools_ = literal_pools(data.examples)
        corrupted, labels = est.corrupt(data, seed=seed + 10_000)
        metrics = est.evaluate(corrupted, labels)
        probs = est.predict_proba(corrupted)
        records = [{"pair": ex.admission_key, "scores": [float(v) for v in p], "labels": [int(v) for v in y]}
                   for ex, p, y in zip(corrupted, probs, labels)]
    else:
        results = est.generate(data, seed=seed)
        from .metrics import rouge
        from .text import detokenize
        refs = [detokenize(ex.text_ids, data.vocab.text) for ex in data]
        metrics = {"rouge2": float(np.mean([rouge(r.text, ref, "RG2") for r, ref in zip(results, refs)])),
                   "rougeL": float(np.mean([rouge(r.text, ref, "RGL") for r, ref in zip(results, refs)]))}
        records = [{"pair": ex.admission_key, "ids": r.ids, "text": r.text, "truncated": r.truncated,
                    "reference": ref} for ex, r, ref in zip(data, results, refs)]
    if out is not None:
        _write_jsonl(out / "predictions.jsonl", records)
    return metrics


def cmd_finetune(args):
    train, info = _load_data(args.data, "train")
    est = _make_finetuner(args, info.get("variant", "dxpx"))
    est.fit(train)
    out = _out(args)
    meta = {"seed": args.seed, "task": args.task, "variant": info.get("variant", "dxpx")}
    if args.task == "error":
        meta["pools"] = est.pools_
    est.save(out / "finetune.npz", meta)
    metrics = {"train_loss": est.history_[-1]["loss"] if est.history_ else None}
    eval_split = args.eval_split
    if eval_split and (Path(args.data) / f"{eval_split}.jsonl").exists():
        data, _ = _load_data(args.data, eval_split)
        if len(data):
            metrics[eval_split] = _evaluate(args.task, est, data, args.seed, out)
    write_manifest(out, args, metrics, est.model_.config.to_dict(), {"task": args.task})


def _load_finetuned(args, vocab):
    from .model import load_checkpoint
    path = _need_file(args.checkpoint, "checkpoint")
    _, _, _, meta = load_checkpoint(path)
    task = meta.get("task")
    if task not in TASK_DEFAULTS:
        raise CliError(f"{path} is not a fine-tuned checkpoint (task={task!r})")
    est = _estimator_class(task).load(path, vocab)
    if task == "error" and "pools" in meta:
        est.pools_ = {k: list(v) for k, v in meta["pools"].items()}
    return task, est


def cmd_evaluate(args):
    if args.checkpoint is None:
        raise CliError("evaluate needs --checkpoint (a fine-tuned model)")
    data, _ = _load_data(args.data, args.split)
    task, est = _load_finetuned(args, data.vocab)
    out = _out(args)
    metrics = _evaluate(task, est, data, args.seed, out, args.direction)
    write_manifest(out, args, metrics, est.model_.config.to_dict(), {"task": task})


def cmd_generate(args):
    data, info = _load_data(args.data, args.split)
    task, est = _load_finetuned(args, data.vocab)
    if task != "generation":
        raise CliError(f"checkpoint was fine-tuned for {task}, not generation")
    if args.strategy:
        est.strategy = args.strategy
    if args.top_p is not None:
        est.top_p = args.top_p
    out = _out(args)
    metrics = _evaluate("generation", est, data, args.seed, out)
    write_manifest(out, args, metrics, est.model_.config.to_dict(), {"task": task})


def cmd_export_attn(args):
    from .model import GraphTextModel
    data, _ = _load_data(args.data, args.split)
    model = GraphTextModel.load(_need_file(args.checkpoint, "checkpoint"))
    cfg = model.config
    if not 0 <= args.layer < cfg.cross_layers:
        raise CliError(f"layer {args.layer} outside [0, {cfg.cross_layers})")
    if not 0 <= args.head < cfg.num_heads:
        raise CliError(f"head {args.head} outside [0, {cfg.num_heads})")
    if not 0 <= args.index < len(data):
        raise CliError(f"pair index {args.index} outside [0, {len(data)})")
    ex = data[args.index]
    out_dir = _out(args)
    matrix, rows, cols = attention_matrix(model, ex, data.vocab, args.layer, args.head)
    paths = export_attention(matrix, rows, cols, out_dir, meta={"pair": ex.admission_key, "layer": args.layer,
                                                                 "head": args.head})
    write_manifest(out_dir, args, {"shape": list(matrix.shape)}, cfg.to_dict(),
                   {"files": [str(p.name) for p in paths]})


def attention_matrix(model, example, vocab: Vocabularies, layer: int, head: int):
    """(1+N_v) x N_T graph-query/text-key weights with row and column labels."""
    model.eval()
    with ad.no_grad():
        out = model(collate([example], vocab), retain_attention=True)
    key = f"cross.{layer}.graph_to_text"
    if key not in out.attentions:
        raise CliError(f"no attention map {key!r} retained")
    att = out.attentions[key][0, head]
    rows = ["[SUM]"] + [vocab.graph.tokens[g] for g in example.node_ids]
    cols = vocab.text.convert_ids(example.text_ids)
    return att[:len(rows), :len(cols)], rows, cols


def export_attention(matrix: np.ndarray, rows, cols, out_dir, meta: dict | None = None) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    csv_path, json_path, svg_path = out_dir / "attention.csv", out_dir / "attention.json", out_dir / "attention.svg"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query"] + list(cols))
        for label, row in zip(rows, matrix):
            w.writerow([label] + [repr(float(v)) for v in row])
    json_path.write_text(json.dumps({"rows": list(rows), "cols": list(cols), "matrix": matrix.tolist(),
                                     **(meta or {})}, indent=2))
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(cols)), max(3, 0.3 * len(rows))))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_xticks(range(len(cols)), labels=cols, rotation=90, fontsize=7)
    ax.set_yticks(range(len(rows)), labels=rows, fontsize=7)
    ax.set_xlabel("text key")
    ax.set_ylabel("graph query")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return [csv_path, json_path, svg_path]


def read_attention_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows, vals = [], []
        for r in reader:
            rows.append(r[0])
            vals.append([float(v) for v in r[1:]])
    return np.array(vals), rows, header[1:]


# ------------------------------------------------------------------ parser

def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--hidden-size", type=int, default=128)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--text-layers", type=int, default=2)
    g.add_argument("--graph-layers", type=int, default=2)
    g.add_argument("--cross-layers", type=int, default=4)
    g.add_argument("--intermediate-size", type=int, default=512)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--no-summary", action="store_true", help="drop the summary network")
    g.add_argument("--init-embedding", action="store_true",
                   help="literal node embedding = mean of its description token embeddings")
    g.add_argument("--no-adjacency", action="store_true", help="graph attention sees all nodes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ehrjoint", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--from-manifest", help="replay the arguments recorded in a manifest")
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--out", default=None, help="output directory")
        return p

    p = add("synth", cmd_synth, "generate a synthetic paired dataset")
    p.add_argument("--variant", choices=["dxpx", "rx"], default="dxpx")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--pool-size", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--mortality", type=float, default=0.04)
    p.add_argument("--readmission", type=float, default=0.27)
    p.add_argument("--outcome-signal", type=float, default=0.0)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--node-cap", type=int, default=DEFAULT_NODE_CAP)
    p.add_argument("--schema-file", default=None)

    p = add("convert", cmd_convert, "convert CSV tables to graph records (and pairs, if notes.csv exists)")
    p.add_argument("--tables", required=False)
    p.add_argument("--schema", required=False)
    p.add_argument("--node-cap", type=int, default=DEFAULT_NODE_CAP)
    p.add_argument("--split-name", default="train")

    p = add("pretrain", cmd_pretrain, "pre-train on a paired dataset")
    p.add_argument("--data", required=False)
    p.add_argument("--tasks", default="mlm,mlp,rc,ap")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--mlm-prob", type=float, default=0.15)
    p.add_argument("--mlp-prob", type=float, default=0.15)
    p.add_argument("--rc-fraction", type=float, default=0.1)
    p.add_argument("--p-replace", type=float, default=0.5)
    p.add_argument("--rc-balanced", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--init-weights", default=None, help="npz of parameters to import before training")
    _model_flags(p)

    p = add("finetune", cmd_finetune, "fine-tune on a downstream task")
    p.add_argument("--task", choices=sorted(TASK_DEFAULTS), required=False)
    p.add_argument("--data", required=False)
    p.add_argument("--pretrained", default=None)
    p.add_argument("--lr", type=float, default=None, help="defaults per task")
    p.add_argument("--epochs", type=int, default=None, help="defaults per task")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--label", choices=["mortality", "readmission"], default="mortality")
    p.add_argument("--corruption", type=float, default=0.25)
    p.add_argument("--strategy", choices=["greedy", "top_p"], default=None)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--sep-mask-prob", type=float, default=0.5)
    p.add_argument("--eval-split", default="valid")
    _model_flags(p)

    for name, func, help_ in (("evaluate", cmd_evaluate, "evaluate a fine-tuned checkpoint"),
                              ("generate", cmd_generate, "decode notes with a generation checkpoint")):
        p = add(name, func, help_)
        p.add_argument("--data", required=False)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--split", default="test")
        p.add_argument("--direction", choices=["text", "graph"], default="text")
        if name == "generate":
            p.add_argument("--strategy", choices=["greedy", "top_p"], default=None)
            p.add_argument("--top-p", type=float, default=None)

    p = add("export-attn", cmd_export_attn, "export a graph-to-text attention map")
    p.add_argument("--data", required=False)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    return ap


_REQUIRED = {"convert": ("tables", "schema"), "pretrain": ("data",), "finetune": ("task", "data"),
             "evaluate": ("data",), "generate": ("data",), "export-attn": ("data",)}


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest:
        manifest = json.loads(_need_file(args.from_manifest, "manifest").read_text())
        if manifest.get("command") != args.command:
            raise CliError(f"manifest is for {manifest.get('command')!r}, not {args.command!r}")
        out = args.out
        recorded = manifest["args"]
        for k, v in recorded.items():
            setattr(args, k, v)
        if out is not None:
            args.out = out
    for name in _REQUIRED.get(args.command, ()):
        if getattr(args, name) is None:
            raise CliError(f"--{name.replace('_', '-')} is required for {args.command}")
    if args.out is None:
        raise CliError("--out is required")
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse(argv)
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, ValueError, KeyError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
