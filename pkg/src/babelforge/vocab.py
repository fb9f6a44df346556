"""Subword vocabulary with an append-only block of language tokens.

Id layout: five special tokens, then single characters, then merged pieces in
merge order, then one ``[<code>]`` token per language.  Keeping the language
tokens at the end means adding a language only ever appends rows to an
embedding table.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import kernels

MARKER = "▁"
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>", "<mask>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID = range(len(SPECIALS))
HEADER_PREFIX = "BABELVOCAB"


class VocabError(ValueError):
    pass


def lang_surface(code: str) -> str:
    return f"[{code}]"


def _surface_code(token: str) -> str:
    if not (token.startswith("[") and token.endswith("]") and len(token) > 2):
        raise VocabError(f"not a language token: {token!r}")
    return token[1:-1]


def _chunks(text: str) -> list[str]:
    """Split text into marker-initial chunks; merges never cross a chunk."""
    marked = text.replace(" ", MARKER)
    return [MARKER + c for c in marked.split(MARKER)]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    lang_block_start: int
    version: int = 1
    _piece_ids: dict = field(init=False, repr=False, compare=False)
    _lang_ids: dict = field(init=False, repr=False, compare=False)
    _max_piece_len: int = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if toks[:len(SPECIALS)] != SPECIALS:
            raise VocabError("vocabulary must start with the special tokens")
        if not len(SPECIALS) <= self.lang_block_start <= len(toks):
            raise VocabError(f"bad language block start {self.lang_block_start}")
        if len(set(toks)) != len(toks):
            raise VocabError("duplicate token surface forms")
        pieces = toks[len(SPECIALS):self.lang_block_start]
        lang_ids = {}
        for i in range(self.lang_block_start, len(toks)):
            lang_ids[_surface_code(toks[i])] = i
        for p in pieces:
            if "\n" in p or not p:
                raise VocabError(f"invalid piece {p!r}")
        object.__setattr__(self, "_piece_ids",
                           {p: i + len(SPECIALS) for i, p in enumerate(pieces)})
        object.__setattr__(self, "_lang_ids", lang_ids)
        object.__setattr__(self, "_max_piece_len", max((len(p) for p in pieces), default=1))
        object.__setattr__(self, "_cache", {})

    # -- inventory -----------------------------------------------------------
    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pieces(self) -> tuple[str, ...]:
        return self.tokens[len(SPECIALS):self.lang_block_start]

    @property
    def lang_codes(self) -> tuple[str, ...]:
        return tuple(_surface_code(t) for t in self.tokens[self.lang_block_start:])

    @property
    def special_ids(self) -> dict[str, int]:
        return {"pad": PAD_ID, "bos": BOS_ID, "eos": EOS_ID, "unk": UNK_ID, "mask": MASK_ID}

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    unk_id = UNK_ID
    mask_id = MASK_ID

    def lang_id(self, code: str) -> int:
        try:
            return self._lang_ids[code]
        except KeyError:
            raise VocabError(f"unknown language code {code!r}") from None

    def has_lang(self, code: str) -> bool:
        return code in self._lang_ids

    def piece_id(self, piece: str) -> int:
        return self._piece_ids[piece]

    def is_lang_token(self, tid: int) -> bool:
        return self.lang_block_start <= tid < len(self.tokens)

    # -- encoding ------------------------------------------------------------
    def encode(self, text: str) -> list[int]:
        if not text:
            return []
        out: list[int] = []
        cache = self._cache
        for chunk in _chunks(text):
            ids = cache.get(chunk)
            if ids is None:
                ids = kernels.segment(chunk, self._piece_ids, self._max_piece_len, UNK_ID)
                cache[chunk] = ids
            out.extend(ids)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        n = len(self.tokens)
        for tid in ids:
            tid = int(tid)
            if not 0 <= tid < n:
                raise VocabError(f"token id {tid} out of range for vocabulary of size {n}")
            if tid < len(SPECIALS) or tid >= self.lang_block_start:
                continue
            parts.append(self.tokens[tid])
        text = "".join(parts).replace(MARKER, " ")
        return text[1:] if text.startswith(" ") else text

    # -- serialization -------------------------------------------------------
    def to_text(self) -> str:
        header = f"{HEADER_PREFIX} v{self.version} size={self.size} langblock={self.lang_block_start}"
        return "\n".join((header,) + self.tokens) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise VocabError("empty vocabulary file")
        fields = lines[0].split(" ")
        if len(fields) != 4 or fields[0] != HEADER_PREFIX or not fields[1].startswith("v"):
            raise VocabError(f"bad vocabulary header: {lines[0]!r}")
        try:
            version = int(fields[1][1:])
            size = int(fields[2].removeprefix("size="))
            block = int(fields[3].removeprefix("langblock="))
        except ValueError as exc:
            raise VocabError(f"bad vocabulary header: {lines[0]!r}") from exc
        tokens = tuple(lines[1:])
        if len(tokens) != size:
            raise VocabError(f"header says {size} tokens, file has {len(tokens)}")
        return cls(tokens, block, version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_text().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_bytes().decode("utf-8"))

    def extend_languages(self, new_codes: Sequence[str]) -> "Vocabulary":
        new_codes = list(new_codes)
        if len(set(new_codes)) != len(new_codes):
            raise VocabError(f"duplicate language codes in {new_codes}")
        existing = set(self.tokens)
        for code in new_codes:
            if code in self._lang_ids:
                raise VocabError(f"language {code!r} already in vocabulary")
            if lang_surface(code) in existing:
                raise VocabError(f"surface form {lang_surface(code)!r} collides with a piece")
        tokens = self.tokens + tuple(lang_surface(c) for c in new_codes)
        return Vocabulary(tokens, self.lang_block_start, self.version + 1)

    def is_extension_of(self, other: "Vocabulary") -> bool:
        return (self.lang_block_start == other.lang_block_start
                and self.tokens[:other.size] == other.tokens)


def _word_counts(sentences: Iterable[str]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in sentences:
        if not s:
            continue
        for chunk in _chunks(s):
            counts[chunk] = counts.get(chunk, 0) + 1
    return counts


def build_vocab(mono_corpora, target_size: int, lang_codes: Sequence[str]) -> Vocabulary:
    """Train greedy byte-pair-style merges until ``target_size`` tokens.

    Pair-frequency ties go to the lexicographically smallest pair.  Fewer
    tokens than requested are returned if the corpus runs out of pairs.
    """
    lang_codes = list(lang_codes)
    if len(set(lang_codes)) != len(lang_codes):
        raise VocabError(f"duplicate language codes in {lang_codes}")
    sentences = (s for corpus in mono_corpora for doc in corpus.documents for s in doc)
    counts = _word_counts(sentences)
    if not counts:
        raise VocabError("cannot build a vocabulary from empty corpora")
    alphabet = sorted({ch for w in counts for ch in w})
    floor = len(SPECIALS) + len(alphabet) + len(lang_codes)
    if target_size < floor:
        raise VocabError(
            f"target_size={target_size} below capacity floor {floor} "
            f"({len(SPECIALS)} specials + {len(alphabet)} characters + {len(lang_codes)} languages)")
    reserved = set(SPECIALS) | {lang_surface(c) for c in lang_codes}
    for ch in alphabet:
        if ch in reserved:
            raise VocabError(f"character {ch!r} collides with a reserved token")

    merges = _train_merges(counts, target_size - floor, reserved, set(alphabet))
    tokens = SPECIALS + tuple(alphabet) + tuple(merges) + tuple(lang_surface(c) for c in lang_codes)
    return Vocabulary(tokens, len(SPECIALS) + len(alphabet) + len(merges))


def _train_merges(counts: dict[str, int], n_merges: int, reserved: set, known: set) -> list[str]:
    words = [tuple(w) for w in counts]
    freqs = list(counts.values())
    pair_counts = kernels.count_pairs(words, freqs)
    words = [list(w) for w in words]
    where: dict[tuple, set] = {}
    for wi, w in enumerate(words):
        for j in range(len(w) - 1):
            where.setdefault((w[j], w[j + 1]), set()).add(wi)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)
    merges: list[str] = []
    known = set(known)
    banned: set = set()

    def bump(pair, delta, wi):
        c = pair_counts.get(pair, 0) + delta
        if c <= 0:
            pair_counts.pop(pair, None)
        else:
            pair_counts[pair] = c
            if delta > 0:
                where.setdefault(pair, set()).add(wi)

    while len(merges) < n_merges and heap:
        negc, pair = heapq.heappop(heap)
        if pair in banned or pair_counts.get(pair, 0) != -negc:
            continue
        new = pair[0] + pair[1]
        if new in reserved:
            banned.add(pair)
            continue
        a, b = pair
        touched = set()
        for wi in sorted(where.pop(pair, ())):
            w = words[wi]
            if len(w) < 2:
                continue
            freq = freqs[wi]
            for j in range(len(w) - 1):
                p = (w[j], w[j + 1])
                bump(p, -freq, wi)
                touched.add(p)
            out = []
            j = 0
            while j < len(w):
                if j < len(w) - 1 and w[j] == a and w[j + 1] == b:
                    out.append(new)
                    j += 2
                else:
                    out.append(w[j])
                    j += 1
            words[wi] = out
            for j in range(len(out) - 1):
                p = (out[j], out[j + 1])
                bump(p, freq, wi)
                touched.add(p)
        for p in touched:
            if p in pair_counts:
                heapq.heappush(heap, (-pair_counts[p], p))
        if new not in known:
            known.add(new)
            merges.append(new)
    return merges


def encode(vocab: Vocabulary, text: str) -> list[int]:
    return vocab.encode(text)


def decode_text(vocab: Vocabulary, ids: Iterable[int]) -> str:
    return vocab.decode(ids)


def extend_languages(vocab: Vocabulary, new_codes: Sequence[str]) -> Vocabulary:
    return vocab.extend_languages(new_codes)
