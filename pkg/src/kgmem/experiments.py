"""Config-driven experiment grids: datasets on demand, seeded runs, JSON-lines ledger."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from itertools import product
from pathlib import Path

from kgmem.datagen import (
    SequenceGenParams,
    dataset_stats,
    dump_dataset,
    gen_sequences,
    gen_triplets,
    load_dataset,
)
from kgmem.graph import (
    KnowledgeGraph,
    SynthGraphParams,
    extend_bidirectional,
    filter_properties,
    load_banned,
    load_edge_list,
    synth_kg,
)
from kgmem.model import ModelConfig, count_parameters, derive_embedding_size
from kgmem.tokenizer import Vocab, build_vocab, encode_sequences, encode_triplets
from kgmem.trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)

SPEC_SCHEMA = "kgmem.experiment/1"
RUN_SCHEMA = "kgmem.run/1"
LEDGER_NAME = "runs.jsonl"
OUTPUT_ROOT_ENV = "KGMEM_OUTPUT_ROOT"
MASK64 = 2**64 - 1


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class GraphSource:
    path: str | None = None
    banned: str | None = None
    synth: SynthGraphParams | None = None

    def describe(self) -> dict:
        if self.synth is not None:
            return {"synth": asdict(self.synth)}
        return {"path": self.path, "banned": self.banned}


@dataclass(frozen=True)
class ExperimentSpec:
    setup: int
    kind: str
    sizes: tuple[int, ...]
    layers: tuple[int, ...]
    activations: tuple[str, ...]
    graph: GraphSource
    base_params: tuple[int, ...] | None = None
    d_model: tuple[int, ...] | None = None
    heads: int = 4
    batch_size: int = 128
    epochs: int = 500
    eval_every: int = 2
    repeats: int = 1
    seed: int = 0
    output_dir: str = "runs"
    min_nodes: int = 4
    max_nodes: int = 6
    bfs_depth: int = 5

    def __post_init__(self):
        if self.setup not in (1, 2, 3, 4):
            raise SpecError("setup must be 1, 2, 3 or 4")
        if self.kind not in ("triplets", "sequences"):
            raise SpecError("kind must be 'triplets' or 'sequences'")
        if (self.base_params is None) == (self.d_model is None):
            raise SpecError("give exactly one of base_params or d_model")
        for name in ("sizes", "layers", "activations"):
            if not getattr(self, name):
                raise SpecError(f"{name} must be a non-empty list")
        if not (self.base_params or self.d_model):
            raise SpecError("width list must be non-empty")
        if self.repeats < 1:
            raise SpecError("repeats must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "ExperimentSpec":
        raw = dict(raw)
        schema = raw.pop("schema", None)
        if schema != SPEC_SCHEMA:
            raise SpecError(f"expected schema {SPEC_SCHEMA!r}, got {schema!r}")
        g = raw.pop("graph", None)
        if not isinstance(g, dict):
            raise SpecError("graph section is required")
        base_dir = base_dir or Path(".")
        if "synth" in g:
            try:
                graph = GraphSource(synth=SynthGraphParams(**g["synth"]))
            except TypeError as exc:
                raise SpecError(f"graph.synth: {exc}") from None
        elif "path" in g:
            resolve = lambda p: str((base_dir / p).resolve()) if p else None  # noqa: E731
            graph = GraphSource(path=resolve(g["path"]), banned=resolve(g.get("banned")))
        else:
            raise SpecError("graph needs either 'synth' or 'path'")
        seq = raw.pop("sequence", {}) or {}
        for key in ("sizes", "layers", "activations", "base_params", "d_model"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        try:
            return cls(graph=graph, **raw, **seq)
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)

    def cells(self) -> list[dict]:
        """Grid cells in canonical order: size, layers, width, activation."""
        widths = self.base_params if self.base_params is not None else self.d_model
        out = []
        for size, n_layers, width, act in product(self.sizes, self.layers, widths, self.activations):
            if self.base_params is not None:
                base, d = width, derive_embedding_size(width, n_layers, self.heads)
            else:
                base, d = None, width
            out.append({
                "setup": self.setup, "kind": self.kind, "size": size, "layers": n_layers,
                "base_params": base, "d_model": d, "activation": act,
            })
        return out


def cell_hash(cell: dict) -> int:
    digest = hashlib.sha256(json.dumps(cell, sort_keys=True).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def run_seed(master_seed: int, cell: dict, repeat: int) -> int:
    return (master_seed ^ cell_hash(cell) ^ repeat) & MASK64


def run_key(cell: dict, repeat: int) -> str:
    return json.dumps({**cell, "repeat": repeat}, sort_keys=True)


def curve_filename(cell: dict, seed: int) -> str:
    return (
        f"s{cell['setup']}_n{cell['size']}_L{cell['layers']}_d{cell['d_model']}"
        f"_{cell['activation']}_seed{seed}.csv"
    )


# --- datasets --------------------------------------------------------------

def load_graph(source: GraphSource) -> KnowledgeGraph:
    if source.synth is not None:
        g = synth_kg(source.synth)
    else:
        g = load_edge_list(Path(source.path).read_text(encoding="utf-8"))
    if source.banned:
        g = filter_properties(g, load_banned(Path(source.banned).read_text(encoding="utf-8")))
    return g


def generate_dataset(
    g: KnowledgeGraph,
    kind: str,
    count: int | None,
    seed: int,
    out_dir: Path,
    min_nodes: int = 4,
    max_nodes: int = 6,
    bfs_depth: int = 5,
) -> Path:
    """Write ``dataset.tsv``, ``vocab.tsv`` and ``stats.json`` into ``out_dir``."""
    if kind == "triplets":
        data = gen_triplets(g, seed=seed, limit=count)
        meta = {"kind": kind, "seed": seed, "limit": count}
    elif kind == "sequences":
        if count is None:
            raise ValueError("sequence generation needs a count")
        params = SequenceGenParams(count, min_nodes, max_nodes, bfs_depth, seed)
        data = gen_sequences(extend_bidirectional(g), params)
        meta = {"kind": kind, **asdict(params)}
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    vocab = build_vocab(data)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dataset.tsv").write_text(dump_dataset(data), encoding="utf-8")
    (out_dir / "vocab.tsv").write_text(vocab.dumps(), encoding="utf-8")
    stats = {**meta, **dataset_stats(data)}
    stats["length_histogram"] = {str(k): v for k, v in stats["length_histogram"].items()}
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir


@lru_cache(maxsize=8)
def load_encoded(data_dir: str, kind: str, max_nodes: int):
    d = Path(data_dir)
    data = load_dataset((d / "dataset.tsv").read_text(encoding="utf-8"), kind)
    vocab = Vocab.loads((d / "vocab.tsv").read_text(encoding="utf-8"))
    if kind == "triplets":
        return vocab, encode_triplets(data, vocab)
    return vocab, encode_sequences(data, vocab, max_nodes=max_nodes)


def _dataset_dir(spec: ExperimentSpec, out: Path, size: int) -> Path:
    return out / "data" / f"{spec.kind}_n{size}"


def ensure_datasets(spec: ExperimentSpec, out: Path) -> dict[int, Path]:
    dirs = {}
    graph = None
    for size in spec.sizes:
        d = _dataset_dir(spec, out, size)
        if not (d / "dataset.tsv").exists() or not (d / "vocab.tsv").exists():
            if graph is None:
                graph = load_graph(spec.graph)
            log.info("generating %s dataset of size %d", spec.kind, size)
            generate_dataset(graph, spec.kind, size, spec.seed, d, spec.min_nodes, spec.max_nodes, spec.bfs_depth)
        dirs[size] = d
    return dirs


# --- runs ------------------------------------------------------------------

@dataclass(frozen=True)
class Job:
    cell: dict
    repeat: int
    seed: int
    data_dir: str
    out_dir: str
    heads: int
    batch_size: int
    epochs: int
    eval_every: int
    max_nodes: int


def execute_job(job: Job) -> dict:
    cell = job.cell
    t0 = time.perf_counter()
    record = {
        "schema": RUN_SCHEMA,
        "key": run_key(cell, job.repeat),
        "cell": cell,
        "repeat": job.repeat,
        "seed": job.seed,
    }
    try:
        vocab, batch = load_encoded(job.data_dir, cell["kind"], job.max_nodes)
        cfg = ModelConfig(
            vocab_size=vocab.size, d_model=cell["d_model"], n_layers=cell["layers"],
            n_heads=job.heads, activation=cell["activation"], max_len=batch.max_len,
        )
        tcfg = TrainConfig(batch_size=job.batch_size, epochs=job.epochs, eval_every=job.eval_every, seed=job.seed)
        record["model_config"] = cfg.to_dict()
        record["n_params"] = count_parameters(cfg)
        record["n_predictions"] = batch.n_predictions
        _, curve = train(cfg, tcfg, batch)
        rel = Path("curves") / curve_filename(cell, job.seed)
        path = Path(job.out_dir) / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(curve.to_csv(), encoding="utf-8")
        record.update(
            status="ok",
            final_accuracy=curve.final_accuracy,
            final_mac=curve.final_mac,
            curve_file=rel.as_posix(),
            error=None,
        )
    except (TrainingDiverged, ValueError, OSError) as exc:
        record.update(status="failed", final_accuracy=None, final_mac=None, curve_file=None,
                      error=f"{type(exc).__name__}: {exc}")
    record["wall_time_s"] = round(time.perf_counter() - t0, 3)
    return record


def read_ledger(path) -> list[dict]:
    """Parse a ledger; an unterminated final line (interrupted write) is ignored."""
    path = Path(path)
    if not path.exists():
        return []
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    out = []
    for n, line in enumerate(lines[:-1], 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SpecError(f"{path}:{n}: corrupt ledger line: {exc}") from None
    if lines[-1].strip():
        log.warning("%s: ignoring unterminated last line", path)
    return out


def _drop_partial_tail(path: Path) -> None:
    if not path.exists():
        return
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        path.write_bytes(data[: data.rfind(b"\n") + 1])


def resolve_output_dir(spec: ExperimentSpec, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    out = Path(spec.output_dir)
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    return out


def plan_jobs(spec: ExperimentSpec, out: Path, data_dirs: dict[int, Path]) -> list[Job]:
    jobs = []
    for cell in spec.cells():
        for r in range(spec.repeats):
            jobs.append(Job(
                cell=cell, repeat=r, seed=run_seed(spec.seed, cell, r),
                data_dir=str(data_dirs[cell["size"]]), out_dir=str(out),
                heads=spec.heads, batch_size=spec.batch_size, epochs=spec.epochs,
                eval_every=spec.eval_every, max_nodes=spec.max_nodes,
            ))
    return jobs


def run_experiment(
    spec: ExperimentSpec,
    out: str | Path | None = None,
    workers: int = 1,
    resume: bool = True,
    max_runs: int | None = None,
) -> list[dict]:
    """Execute every (cell, repeat) not yet in the ledger; return the full ledger.

    Records are appended in grid order whatever the worker count, so the
    ledger is identical between serial and parallel execution.
    ``max_runs`` bounds how many new runs this call executes.
    """
    out = resolve_output_dir(spec, out)
    out.mkdir(parents=True, exist_ok=True)
    ledger_path = out / LEDGER_NAME
    done = {rec["key"] for rec in read_ledger(ledger_path)}
    if done and not resume:
        raise SpecError(f"{ledger_path} already has {len(done)} runs; resume is disabled")
    _drop_partial_tail(ledger_path)
    (out / "spec.json").write_text(json.dumps(spec_to_dict(spec), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    data_dirs = ensure_datasets(spec, out)
    pending = [j for j in plan_jobs(spec, out, data_dirs) if run_key(j.cell, j.repeat) not in done]
    if max_runs is not None:
        pending = pending[:max_runs]
    log.info("%d runs pending (%d already in ledger)", len(pending), len(done))

    def append(rec: dict) -> None:
        with open(ledger_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log.info("run %s repeat %d: %s mac=%s", rec["cell"], rec["repeat"], rec["status"], rec.get("final_mac"))

    if workers <= 1 or len(pending) <= 1:
        for job in pending:
            append(execute_job(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(execute_job, pending):
                append(rec)
    return read_ledger(ledger_path)


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d.pop("graph")
    seq = {k: d.pop(k) for k in ("min_nodes", "max_nodes", "bfs_depth")}
    for key in ("sizes", "layers", "activations", "base_params", "d_model"):
        if d[key] is not None:
            d[key] = list(d[key])
    return {"schema": SPEC_SCHEMA, **d, "graph": spec.graph.describe(), "sequence": seq}
