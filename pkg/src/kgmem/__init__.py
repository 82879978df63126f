"""Memorization-capacity laboratory for small decoder-only transformers
trained on knowledge-graph triplets and traversal sequences."""

from kgmem.graph import (
    ExtendedGraph,
    GraphError,
    KnowledgeGraph,
    SynthGraphParams,
    bfs_subgraph,
    extend_bidirectional,
    filter_properties,
    load_edge_list,
    neighbors,
    synth_kg,
)
from kgmem.datagen import (
    Sequence,
    SequenceGenParams,
    Triplet,
    TripletSet,
    dataset_stats,
    gen_sequences,
    gen_triplets,
)
from kgmem.tokenizer import EncodedBatch, Vocab, build_vocab, decode, encode_sequences, encode_triplets
from kgmem.model import ModelConfig, AdamState, count_parameters, derive_embedding_size, init_params
from kgmem.trainer import CapacityCurve, RepeatSummary, TrainConfig, aggregate_repeats, evaluate, train

__version__ = "0.1.0"
