"""Command-line entry point: ``kgmem generate|train|run|report|inspect``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from kgmem.datagen import DatasetError
from kgmem.experiments import (
    LEDGER_NAME,
    OUTPUT_ROOT_ENV,
    ExperimentSpec,
    GraphSource,
    SpecError,
    load_encoded,
    generate_dataset,
    load_graph,
    read_ledger,
    run_experiment,
)
from kgmem.graph import GraphError, SynthGraphParams
from kgmem.model import ConfigError, ModelConfig, count_parameters, load_checkpoint
from kgmem.tokenizer import TokenizerError
from kgmem.trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("kgmem")


def _synth(text: str) -> SynthGraphParams:
    try:
        n, p, deg, seed = text.split(",")
        return SynthGraphParams(int(n), int(p), float(deg), int(seed))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected NODES,PROPS,DEGREE,SEED: {exc}") from None


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / name


def cmd_generate(args) -> int:
    if args.graph is None and args.synth is None:
        raise SystemExit("generate: give --graph FILE or --synth NODES,PROPS,DEGREE,SEED")
    source = GraphSource(path=args.graph, banned=args.banned, synth=args.synth)
    g = load_graph(source)
    out = Path(args.out) if args.out else _default_out(f"data/{args.kind}")
    generate_dataset(g, args.kind, args.count, args.seed, out, args.min_nodes, args.max_nodes, args.bfs_depth)
    stats = json.loads((out / "stats.json").read_text(encoding="utf-8"))
    print(f"wrote {stats['count']} {args.kind} ({stats['n_predictions']} predictions) to {out}")
    return 0


def cmd_train(args) -> int:
    data = Path(args.data)
    kind = json.loads((data / "stats.json").read_text(encoding="utf-8"))["kind"]
    vocab, batch = load_encoded(str(data.resolve()), kind, args.max_nodes)
    cfg = ModelConfig(
        vocab_size=vocab.size, d_model=args.d_model, n_layers=args.layers, n_heads=args.heads,
        activation=args.activation, max_len=batch.max_len,
    )
    tcfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, eval_every=args.eval_every, seed=args.seed)
    print(f"{count_parameters(cfg)} parameters, {batch.n_predictions} predictions")

    def show(epoch, acc, mac):
        log.info("epoch %d accuracy %.4f mac %d", epoch, acc, mac)

    _, curve = train(cfg, tcfg, batch, on_eval=show, checkpoint_path=args.checkpoint,
                     checkpoint_every=args.checkpoint_every, resume=args.resume)
    if args.curve:
        Path(args.curve).write_text(curve.to_csv(), encoding="utf-8")
    print(f"final accuracy {curve.final_accuracy:.4f} mac {curve.final_mac}/{curve.n_predictions}")
    return 0


def cmd_run(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    if args.seed is not None:
        spec = ExperimentSpec(**{**spec.__dict__, "seed": args.seed})
    ledger = run_experiment(spec, out=args.out, workers=args.workers, resume=args.resume)
    ok = sum(r["status"] == "ok" for r in ledger)
    print(f"{len(ledger)} runs in ledger ({ok} ok, {len(ledger) - ok} failed)")
    return 0


def cmd_report(args) -> int:
    from kgmem.report import build_report

    ledger = Path(args.ledger)
    out = Path(args.out) if args.out else (ledger if ledger.is_dir() else ledger.parent) / "report"
    rep = build_report(ledger, out, zoom_epochs=args.zoom)
    for f in rep.files:
        print(f)
    for m in rep.missing:
        print(f"missing curve file: {m}", file=sys.stderr)
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir() and (path / "stats.json").exists():
        print((path / "stats.json").read_text(encoding="utf-8"), end="")
    elif path.is_dir() or path.suffix == ".jsonl":
        records = read_ledger(path / LEDGER_NAME if path.is_dir() else path)
        for r in records:
            c = r["cell"]
            print(f"{c['kind']:9s} n={c['size']:<7d} L={c['layers']} d={c['d_model']:<4d} {c['activation']:8s} "
                  f"rep={r['repeat']} {r['status']:6s} mac={r.get('final_mac')}/{r.get('n_predictions')} "
                  f"params={r.get('n_params')}")
        print(f"{len(records)} runs")
    elif path.suffix == ".npz":
        cfg, params, adam, extra = load_checkpoint(path)
        print(json.dumps({"config": cfg.to_dict(), "step": adam.step, "epoch": extra.get("epoch"),
                          "n_params": sum(a.size for a in params.values())}, indent=2))
    else:
        spec = ExperimentSpec.load(path)
        for cell in spec.cells():
            print(f"{cell}  x{spec.repeats}")
        print(f"{len(spec.cells())} cells, {len(spec.cells()) * spec.repeats} runs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kgmem", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a triplet or sequence dataset")
    g.add_argument("--graph", help="edge-list TSV (source, property, target)")
    g.add_argument("--synth", type=_synth, help="synthetic graph NODES,PROPS,DEGREE,SEED")
    g.add_argument("--banned", help="file with one banned property per line")
    g.add_argument("--kind", choices=("triplets", "sequences"), default="triplets")
    g.add_argument("--count", type=int, help="number of samples (all triplets when omitted)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-nodes", type=int, default=4)
    g.add_argument("--max-nodes", type=int, default=6)
    g.add_argument("--bfs-depth", type=int, default=5)
    g.add_argument("--out", help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model on a generated dataset")
    t.add_argument("data", help="dataset directory from 'generate'")
    t.add_argument("--d-model", type=int, default=128)
    t.add_argument("--layers", type=int, default=1)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--activation", choices=("relu", "gelu", "rrelu", "softmax"), default="softmax")
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--eval-every", type=int, default=2)
    t.add_argument("--max-nodes", type=int, default=6)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--curve", help="write the curve CSV here")
    t.add_argument("--checkpoint", help="checkpoint file (.npz)")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="execute an experiment spec grid")
    r.add_argument("spec", help="experiment spec (JSON)")
    r.add_argument("--out", help=f"output directory (default: spec output_dir under ${OUTPUT_ROOT_ENV})")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--seed", type=int, help="override the master seed")
    r.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                   help="skip runs already in the ledger (default); --no-resume refuses a non-empty ledger")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tables and charts from a run ledger")
    p.add_argument("ledger", help="runs.jsonl or the run directory")
    p.add_argument("--out", help="report directory (default: <run dir>/report)")
    p.add_argument("--zoom", type=int, default=30, help="epochs shown in the early-training panel")
    p.set_defaults(func=cmd_report)

    i = sub.add_parser("inspect", help="describe a dataset dir, ledger, checkpoint or spec")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GraphError, DatasetError, TokenizerError, ConfigError, SpecError,
            TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"kgmem {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
