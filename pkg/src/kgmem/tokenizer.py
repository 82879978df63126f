"""Label vocabulary and fixed-shape encoding of triplets and sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from kgmem.datagen import Sequence, Triplet, TripletSet

PAD_ID = 0


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Bijection between labels and ids ``1..V``; id 0 is padding."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise TokenizerError("duplicate labels in vocabulary")
        object.__setattr__(self, "label_to_id", {lab: i + 1 for i, lab in enumerate(self.labels)})

    pad_id = PAD_ID

    @property
    def id_to_label(self) -> dict[int, str]:
        return {i + 1: lab for i, lab in enumerate(self.labels)}

    @property
    def size(self) -> int:
        """Number of token ids including padding."""
        return len(self.labels) + 1

    def __len__(self) -> int:
        return len(self.labels)

    def id(self, label: str) -> int:
        try:
            return self.label_to_id[label]
        except KeyError:
            raise TokenizerError(f"label {label!r} not in vocabulary") from None

    def dumps(self) -> str:
        return "".join(f"{i + 1}\t{lab}\n" for i, lab in enumerate(self.labels))

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        labels = []
        for lineno, line in enumerate(text.split("\n"), start=1):
            if not line:
                continue
            idx, _, lab = line.partition("\t")
            if int(idx) != len(labels) + 1:
                raise TokenizerError(f"line {lineno}: ids must be consecutive from 1")
            labels.append(lab)
        return cls(tuple(labels))


@dataclass(frozen=True)
class EncodedBatch:
    tokens: np.ndarray
    node_mask: np.ndarray
    target_mask: np.ndarray
    lengths: np.ndarray

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def max_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_predictions(self) -> int:
        return int(self.target_mask.sum())

    def take(self, idx) -> "EncodedBatch":
        return EncodedBatch(self.tokens[idx], self.node_mask[idx], self.target_mask[idx], self.lengths[idx])


def _rows(dataset) -> Iterable[tuple[str, ...]]:
    for sample in dataset:
        yield tuple(sample.elements) if isinstance(sample, Sequence) else tuple(sample)


def build_vocab(dataset) -> Vocab:
    """Ids in first-appearance order over the dataset's samples."""
    seen: dict[str, None] = {}
    for row in _rows(dataset):
        for lab in row:
            seen.setdefault(lab)
    if not seen:
        raise TokenizerError("cannot build a vocabulary from an empty dataset")
    return Vocab(tuple(seen))


def encode_triplets(ts: TripletSet | Iterable[Triplet], v: Vocab) -> EncodedBatch:
    items = list(ts)
    tokens = np.array([[v.id(x) for x in t] for t in items], dtype=np.int64).reshape(len(items), 3)
    n = len(items)
    node_mask = np.zeros((n, 3), dtype=bool)
    node_mask[:, [0, 2]] = True
    target_mask = np.zeros((n, 3), dtype=bool)
    target_mask[:, 2] = True
    return EncodedBatch(tokens, node_mask, target_mask, np.full(n, 3, dtype=np.int64))


def encode_sequences(ss: Iterable[Sequence], v: Vocab, max_nodes: int = 6) -> EncodedBatch:
    """Right-pad with id 0 to ``2 * max_nodes - 1`` tokens.

    Node positions are the even unpadded indices; every node but the first is
    a prediction target.
    """
    seqs = list(ss)
    max_len = 2 * max_nodes - 1
    n = len(seqs)
    tokens = np.zeros((n, max_len), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(seqs):
        if len(s.elements) > max_len:
            raise TokenizerError(f"sequence {i} has {len(s.elements)} tokens, max_len is {max_len}")
        tokens[i, : len(s.elements)] = [v.id(x) for x in s.elements]
        lengths[i] = len(s.elements)
    pos = np.arange(max_len)
    live = pos[None, :] < lengths[:, None]
    node_mask = live & (pos[None, :] % 2 == 0)
    target_mask = node_mask & (pos[None, :] > 0)
    return EncodedBatch(tokens, node_mask, target_mask, lengths)


def decode(row, v: Vocab) -> list[str]:
    out = []
    for tok in np.asarray(row).tolist():
        if tok == PAD_ID:
            continue
        if not 0 < tok <= len(v.labels):
            raise TokenizerError(f"token id {tok} out of range 0..{len(v.labels)}")
        out.append(v.labels[tok - 1])
    return out
