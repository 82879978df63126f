"""Acceptance criteria, each checked at its stated tolerance.

Every test records a one-line verdict that ``conftest.pytest_terminal_summary``
prints at the end of the session. Criteria 1-3 train desk-scale models and
take a few minutes on one CPU core.
"""

import math

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS, tiny_spec_dict
from oracles import central_difference_grads, max_relative_error, sequence_violations, tensor_count

from kgmem.datagen import SequenceGenParams, dataset_stats, gen_sequences, gen_triplets
from kgmem.experiments import ExperimentSpec, run_experiment
from kgmem.graph import KnowledgeGraph, SynthGraphParams, extend_bidirectional, synth_kg
from kgmem.model import ACTIVATIONS, ModelConfig, count_parameters, derive_embedding_size, init_params, loss_and_grads
from kgmem.tokenizer import EncodedBatch, build_vocab, encode_sequences, encode_triplets
from kgmem.trainer import TrainConfig, evaluate, train


def verdict(num: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[num] = (bool(ok), detail)
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="module")
def triplet_graph():
    return synth_kg(SynthGraphParams(1000, 20, 3.0, 1))


@pytest.fixture(scope="module")
def thousand_triplets(triplet_graph):
    ts = gen_triplets(triplet_graph, seed=0, limit=1000)
    v = build_vocab(ts)
    return v, encode_triplets(ts, v)


@pytest.mark.slow
def test_criterion_1_triplet_memorization(triplet_graph, thousand_triplets):
    pairs = len({(s, p) for s, p, _ in triplet_graph.edges})
    v, batch = thousand_triplets
    cfg = ModelConfig(vocab_size=v.size, d_model=128, n_layers=1, n_heads=4, activation="softmax", max_len=3)
    _, curve = train(cfg, TrainConfig(batch_size=128, epochs=500, lr=1e-3, seed=0), batch)
    ok = pairs >= 2000 and curve.n_predictions == 1000 and curve.final_mac >= 995
    verdict(1, ok, f"{pairs} distinct pairs; final MAC {curve.final_mac}/1000 (need >= 995)")


class _Reached(Exception):
    pass


def epochs_to_90(cfg, batch, seed, budget=500):
    def stop(epoch, acc, mac):
        if acc >= 0.9:
            raise _Reached(epoch)

    try:
        train(cfg, TrainConfig(batch_size=128, epochs=budget, seed=seed), batch, on_eval=stop)
    except _Reached as hit:
        return hit.args[0]
    return math.inf


@pytest.mark.slow
def test_criterion_2_embedding_dominance(thousand_triplets):
    v, batch = thousand_triplets
    passes, lines = 0, []
    for seed in range(3):
        e = {
            (d, L): epochs_to_90(ModelConfig(vocab_size=v.size, d_model=d, n_layers=L, max_len=3), batch, seed)
            for d in (16, 128) for L in (1, 2)
        }
        a, b = e[(16, 1)], e[(16, 2)]
        close = max(a, b) <= 1.25 * min(a, b)
        faster = e[(128, 1)] < e[(16, 1)] and e[(128, 2)] < e[(16, 2)]
        passes += close and faster
        lines.append(f"seed {seed}: d16 {a}/{b}, d128 {e[(128, 1)]}/{e[(128, 2)]} (L1/L2)")
    verdict(2, passes >= 2, f"{passes}/3 repeats agree; " + "; ".join(lines))


@pytest.mark.slow
def test_criterion_3_sequence_memorization():
    x = extend_bidirectional(synth_kg(SynthGraphParams(5000, 100, 2.0, 1)))
    seqs = gen_sequences(x, SequenceGenParams(count=500, min_nodes=4, max_nodes=6, bfs_depth=5, seed=0))
    stats = dataset_stats(seqs)
    v = build_vocab(seqs)
    batch = encode_sequences(seqs, v)
    cfg = ModelConfig(vocab_size=v.size, d_model=64, n_layers=1, activation="softmax", max_len=batch.max_len)
    fracs = []
    for seed in range(3):
        _, curve = train(cfg, TrainConfig(batch_size=128, epochs=400, seed=seed), batch)
        fracs.append(curve.final_mac / curve.n_predictions)
    full = sum(f == 1.0 for f in fracs)
    ok = stats["max_attainable"] == stats["n_predictions"] and full >= 2 and min(fracs) >= 0.995
    verdict(3, ok, f"{stats['n_predictions']} node predictions; memorized fractions {[round(f, 4) for f in fracs]}")


def test_criterion_4_full_scale_is_anchor_only():
    # the full-scale grid stays expressible; it is not executed here
    spec = ExperimentSpec.from_dict(tiny_spec_dict(
        sizes=[50_000, 60_000, 70_000, 80_000, 90_000, 100_000], d_model=[128], repeats=10, epochs=500,
    ))
    n_runs = len(spec.cells()) * spec.repeats
    verdict(4, n_runs == 60, f"full-scale setup-1 grid expands to {n_runs} runs; "
            "anchor 100,000 triplets -> 86,776 +- 2,484 recorded, not run")


def _perturbed(cfg, seed=0):
    P = init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, a in P.items():
        a += rng.normal(0, 0.2, a.shape)
    return P


def test_criterion_5_gradient_oracle():
    toks = np.array([[1, 2, 3, 4, 5], [6, 7, 8, 0, 0], [9, 10, 1, 2, 3]])
    mask = np.array([[0, 0, 1, 0, 1], [0, 0, 1, 0, 0], [0, 0, 1, 0, 1]], bool)
    worst = {}
    for act in ACTIVATIONS:
        cfg = ModelConfig(vocab_size=11, d_model=8, n_layers=1, n_heads=4, activation=act, max_len=5)
        P = _perturbed(cfg)

        # a fresh generator per call freezes the sampled RReLU slopes
        def f(p):
            return loss_and_grads(p, cfg, toks, mask, rng=np.random.default_rng(3))[0]

        _, G = loss_and_grads(P, cfg, toks, mask, rng=np.random.default_rng(3))
        worst[act] = max_relative_error(G, central_difference_grads(f, P, h=1e-5))
    ok = all(w < 1e-4 for w in worst.values())
    verdict(5, ok, "max relative error " + ", ".join(f"{a} {w:.1e}" for a, w in worst.items()))


def test_criterion_6_generator_oracles():
    x = extend_bidirectional(synth_kg(SynthGraphParams(5000, 100, 2.0, 1)))
    seqs = gen_sequences(x, SequenceGenParams(count=10_000, seed=11))
    edge_set, node_set = set(x.edges), set(x.nodes)
    bad = sum(bool(sequence_violations(list(s.elements), edge_set, node_set, 4, 6)) for s in seqs)

    ts = gen_triplets(synth_kg(SynthGraphParams(8000, 50, 2.0, 1)), seed=0, limit=10_000)
    keys = [(t.concept, t.property) for t in ts]
    unique = len(keys) == len(set(keys)) == 10_000

    g = KnowledgeGraph.from_edges([("a", "p", "b"), ("a", "p", "c")])
    freq = sum(gen_triplets(g, seed=s).items[0].related == "b" for s in range(1000)) / 1000
    ok = len(seqs) == 10_000 and bad == 0 and unique and abs(freq - 0.5) <= 0.05
    verdict(6, ok, f"{bad} invalid of {len(seqs)} sequences; 10,000 triplet keys unique: {unique}; "
            f"two-target frequency {freq:.3f}")


def test_criterion_7_formulas_and_counts():
    derived = {k: derive_embedding_size(*k) for k in ((128, 1), (128, 2), (128, 4), (16, 2))}
    want = {(128, 1): 128, (128, 2): 64, (128, 4): 32, (16, 2): 8}
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(5):
        heads = int(rng.choice([1, 2, 4]))
        cfg = ModelConfig(
            vocab_size=int(rng.integers(5, 3000)), d_model=heads * int(rng.integers(1, 40)),
            n_layers=int(rng.integers(0, 5)), n_heads=heads, max_len=int(rng.integers(3, 12)),
            ffn_dim=int(rng.integers(1, 300)) if rng.random() < 0.5 else None,
        )
        mismatches += count_parameters(cfg) != tensor_count(cfg)
    ok = derived == want and mismatches == 0
    verdict(7, ok, f"derived sizes {list(derived.values())}; {mismatches}/5 parameter count mismatches")


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in ("runs.jsonl", "spec.json")}


def _ledger_without_times(root):
    from kgmem.experiments import read_ledger

    return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in read_ledger(root / "runs.jsonl")]


def test_criterion_8_determinism(tmp_path):
    specs = [
        tiny_spec_dict(sizes=[30, 60], activations=["rrelu", "gelu"], repeats=2, seed=42),
        tiny_spec_dict(setup=4, kind="sequences", sizes=[40], layers=[1, 2], d_model=[8],
                       activations=["softmax", "relu"], repeats=2, seed=42),
    ]
    same = True
    for i, raw in enumerate(specs):
        spec = ExperimentSpec.from_dict(raw)
        a, b = tmp_path / f"serial{i}", tmp_path / f"par{i}"
        run_experiment(spec, a, workers=1)
        run_experiment(spec, b, workers=4)
        same &= _tree_bytes(a) == _tree_bytes(b) and _ledger_without_times(a) == _ledger_without_times(b)
        same &= any(k.startswith("data/") for k in _tree_bytes(a)) and any(k.startswith("curves/") for k in _tree_bytes(a))
    verdict(8, same, "datasets, curve CSVs and ledgers (minus wall time) identical for 1 vs 4 workers")


def test_criterion_9_metric_identities():
    ts = gen_triplets(synth_kg(SynthGraphParams(300, 5, 2.0, 1)), seed=0, limit=200)
    v = build_vocab(ts)
    batch = encode_triplets(ts, v)
    seen = []

    def check(epoch, acc, mac):
        seen.append(acc * batch.n_predictions == mac)

    cfg = ModelConfig(vocab_size=v.size, d_model=16, max_len=3)
    train(cfg, TrainConfig(batch_size=32, epochs=30), batch, on_eval=check)

    V, n = 50, 20_000
    cfg = ModelConfig(vocab_size=V, d_model=16, max_len=3)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, V, (n, 3))
    tm = np.zeros((n, 3), bool)
    tm[:, 2] = True
    acc, mac = evaluate(init_params(cfg, 0), cfg, EncodedBatch(tokens, tm, tm, np.full(n, 3)))
    sigma = math.sqrt((1 / V) * (1 - 1 / V) / n)
    z = (acc - 1 / V) / sigma
    ok = all(seen) and len(seen) == 15 and abs(z) <= 4 and acc * n == mac
    verdict(9, ok, f"{sum(seen)}/{len(seen)} evaluations exact; chance accuracy {acc:.4f} vs 1/V={1 / V:.4f} (z={z:+.2f})")
