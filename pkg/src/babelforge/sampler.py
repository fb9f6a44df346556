"""Training-data preparation: language-token augmentation, temperature sampling
over directions, pivot-based direction construction, and token-budgeted batches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Bitext
from .synth import PIVOT, derive_rng
from .vocab import EOS_ID, PAD_ID, Vocabulary

TOPOLOGIES = ("n2one", "one2n", "n2n")


class SamplerError(ValueError):
    pass


def direction_probs(sizes: Sequence[int], T: float) -> np.ndarray:
    """p_d proportional to (size_d / total)^(1/T), normalized."""
    if T <= 0 or not math.isfinite(T):
        raise SamplerError(f"temperature must be positive, got {T}")
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise SamplerError("no directions to sample from")
    if np.any(sizes <= 0):
        raise SamplerError("every direction must be nonempty; drop empty ones first")
    share = sizes / sizes.sum()
    # log space keeps tiny shares finite at large T
    logits = np.log(share) / T
    w = np.exp(logits - logits.max())
    return w / w.sum()


@dataclass
class DirectionTable:
    directions: list[tuple[str, str]]
    sizes: list[int]
    temperature: float
    probs: np.ndarray

    @classmethod
    def build(cls, directions, sizes, temperature: float) -> "DirectionTable":
        directions = [tuple(d) for d in directions]
        if len(set(directions)) != len(directions):
            raise SamplerError(f"duplicate directions in {directions}")
        return cls(directions, list(sizes), float(temperature), direction_probs(sizes, temperature))


def augment_pair(pair, src_lang: str, tgt_lang: str, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """x' = [src lang] + x + [eos]; y' = [tgt lang] + y + [eos]."""
    src_ids, tgt_ids = pair
    return ([vocab.lang_id(src_lang), *src_ids, EOS_ID],
            [vocab.lang_id(tgt_lang), *tgt_ids, EOS_ID])


def build_many_to_many(en_centric: Sequence[Bitext], topology: str = "n2n",
                       pivot: str = PIVOT) -> dict[tuple[str, str], list[tuple[str, str]]]:
    """Directions for a topology from English-centric bitexts.

    n2n emits both L->en and en->L over the same pairs; n2one keeps only
    L->en and one2n only en->L.
    """
    if topology not in TOPOLOGIES:
        raise SamplerError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    out: dict[tuple[str, str], list[tuple[str, str]]] = {}
    for b in en_centric:
        if b.tgt_lang == pivot:
            to_en = b
        elif b.src_lang == pivot:
            to_en = b.reversed()
        else:
            raise SamplerError(f"bitext {b.direction} has no {pivot!r} side")
        lang = to_en.src_lang
        if topology in ("n2one", "n2n"):
            out[(lang, pivot)] = list(to_en.pairs)
        if topology in ("one2n", "n2n"):
            out[(pivot, lang)] = [(t, s) for s, t in to_en.pairs]
    return out


@dataclass
class Batch:
    direction: tuple[str, str]
    src_ids: np.ndarray    # (rows, src_len) int64, right-padded with PAD
    tgt_ids: np.ndarray    # (rows, tgt_len) full y', decoder input is [:, :-1]
    src_lengths: np.ndarray
    tgt_lengths: np.ndarray

    @property
    def token_count(self) -> int:
        return int(self.tgt_lengths.sum())

    @property
    def rows(self) -> int:
        return self.src_ids.shape[0]

    @property
    def lengths(self):
        return self.src_lengths, self.tgt_lengths


def collate(direction, examples: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    """Pad augmented (x', y') pairs; rows sorted by source length, longest first."""
    if not examples:
        raise SamplerError("cannot collate an empty batch")
    order = sorted(range(len(examples)), key=lambda i: (-len(examples[i][0]), i))
    ex = [examples[i] for i in order]
    src_len = np.array([len(s) for s, _ in ex], dtype=np.int64)
    tgt_len = np.array([len(t) for _, t in ex], dtype=np.int64)
    src = np.full((len(ex), int(src_len.max())), PAD_ID, dtype=np.int64)
    tgt = np.full((len(ex), int(tgt_len.max())), PAD_ID, dtype=np.int64)
    for i, (s, t) in enumerate(ex):
        src[i, :len(s)] = s
        tgt[i, :len(t)] = t
    return Batch(tuple(direction), src, tgt, src_len, tgt_len)


class DirectionStream:
    """Endless pass over one direction's examples, reshuffled each epoch."""

    def __init__(self, examples, seed: int, key: str):
        self.examples = examples
        self.seed = seed
        self.key = key
        self.epoch = 0
        self.cursor = 0
        self._order = self._shuffle()

    def _shuffle(self):
        return derive_rng(self.seed, "direction", self.key, self.epoch).permutation(len(self.examples))

    def peek(self):
        return self.examples[self._order[self.cursor]]

    def advance(self):
        self.cursor += 1
        if self.cursor >= len(self._order):
            self.epoch += 1
            self.cursor = 0
            self._order = self._shuffle()

    def state(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}

    def restore(self, state: dict):
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self._order = self._shuffle()


class Sampler:
    """Samples a direction per batch by temperature, then fills it sequentially.

    ``examples`` maps each direction to already augmented (x', y') id lists,
    or to raw items turned into such pairs by ``transform`` once picked;
    ``cost`` gives an item's target token count for the budget.
    """

    def __init__(self, examples: dict, batch_tokens: int, temperature: float, seed: int,
                 transform=None, cost=None):
        if batch_tokens < 1:
            raise SamplerError("batch_tokens must be positive")
        dirs = [d for d in examples if len(examples[d]) > 0]
        if not dirs:
            raise SamplerError("no nonempty directions")
        self.table = DirectionTable.build(dirs, [len(examples[d]) for d in dirs], temperature)
        self.batch_tokens = int(batch_tokens)
        self.seed = seed
        self.rng = derive_rng(seed, "sampler")
        self.streams = {d: DirectionStream(examples[d], seed, f"{d[0]}-{d[1]}") for d in dirs}
        self._cdf = np.cumsum(self.table.probs)
        self.transform = transform
        self.cost = cost or (lambda ex: len(ex[1]))

    def sample_direction(self) -> tuple[str, str]:
        u = self.rng.random()
        i = int(np.searchsorted(self._cdf, u, side="right"))
        return self.table.directions[min(i, len(self.table.directions) - 1)]

    def next_batch(self) -> Batch:
        direction = self.sample_direction()
        stream = self.streams[direction]
        picked, used = [], 0
        while True:
            ex = stream.peek()
            cost = self.cost(ex)
            if picked and used + cost > self.batch_tokens:
                break
            picked.append(ex)
            used += cost
            stream.advance()
            if len(picked) >= len(stream.examples):
                break
        if self.transform is not None:
            picked = [self.transform(direction, ex) for ex in picked]
        return collate(direction, picked)

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state,
                "streams": {f"{d[0]}-{d[1]}": s.state() for d, s in self.streams.items()}}

    def restore(self, state: dict):
        self.rng.bit_generator.state = state["rng"]
        for d, s in self.streams.items():
            s.restore(state["streams"][f"{d[0]}-{d[1]}"])


def encode_directions(directions: dict, vocab: Vocabulary) -> dict:
    """Encode and augment raw sentence pairs for every direction."""
    out = {}
    for (src, tgt), pairs in directions.items():
        out[(src, tgt)] = [augment_pair((vocab.encode(s), vocab.encode(t)), src, tgt, vocab)
                           for s, t in pairs]
    return out


def next_batch(state: Sampler, rng=None) -> Batch:
    """Functional spelling of :meth:`Sampler.next_batch`; the sampler owns its rng."""
    return state.next_batch()
