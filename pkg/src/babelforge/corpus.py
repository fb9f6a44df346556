"""Monolingual and parallel corpora, their file formats, and the cleaning pipeline.

Cleaning runs in a fixed order: exact-duplicate removal, language
identification on both sides, then removal of any training pair that shares a
sentence with an evaluation set.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import kernels

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
LID_ORDERS = 3


class CorpusError(ValueError):
    pass


def normalize(s: str) -> str:
    """Trim and collapse whitespace runs; case is preserved."""
    return " ".join(s.split())


@dataclass
class MonoCorpus:
    lang: str
    documents: list[list[str]]

    def __post_init__(self):
        for doc in self.documents:
            for s in doc:
                if not normalize(s):
                    raise CorpusError(f"empty sentence in {self.lang} monolingual corpus")

    @property
    def sentences(self) -> Iterable[str]:
        for doc in self.documents:
            yield from doc

    def __len__(self):
        return sum(len(d) for d in self.documents)


@dataclass
class Bitext:
    src_lang: str
    tgt_lang: str
    pairs: list[tuple[str, str]]

    def __post_init__(self):
        if self.src_lang == self.tgt_lang:
            raise CorpusError(f"bitext source and target language are both {self.src_lang!r}")
        for src, tgt in self.pairs:
            if not normalize(src) or not normalize(tgt):
                raise CorpusError(f"empty side in {self.direction} pair {(src, tgt)!r}")

    @property
    def direction(self) -> str:
        return f"{self.src_lang}-{self.tgt_lang}"

    def reversed(self) -> "Bitext":
        return Bitext(self.tgt_lang, self.src_lang, [(t, s) for s, t in self.pairs])

    def __len__(self):
        return len(self.pairs)


@dataclass
class EvalSet:
    direction: tuple[str, str]
    split: str
    pairs: list[tuple[str, str]]

    def __post_init__(self):
        if self.split not in ("valid", "test"):
            raise CorpusError(f"eval split must be valid or test, got {self.split!r}")
        if not self.pairs:
            raise CorpusError(f"empty {self.split} set for {self.direction}")
        self.direction = tuple(self.direction)

    @property
    def src_lang(self):
        return self.direction[0]

    @property
    def tgt_lang(self):
        return self.direction[1]

    @property
    def sources(self):
        return [s for s, _ in self.pairs]

    @property
    def references(self):
        return [t for _, t in self.pairs]


# -- files ---------------------------------------------------------------------

def bitext_filename(split: str, src: str, tgt: str) -> str:
    return f"{split}.{src}-{tgt}.tsv"


def mono_filename(lang: str) -> str:
    return f"mono.{lang}.txt"


def write_pairs(path, pairs: Sequence[tuple[str, str]]) -> None:
    lines = []
    for s, t in pairs:
        if "\t" in s or "\t" in t or "\n" in s or "\n" in t:
            raise CorpusError(f"tab or newline inside a sentence: {(s, t)!r}")
        lines.append(f"{s}\t{t}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise CorpusError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
            pairs.append((cols[0], cols[1]))
    return pairs


def _parse_name(path) -> tuple[str, str, str]:
    name = Path(path).name
    parts = name.split(".")
    if len(parts) != 3 or parts[2] != "tsv" or parts[1].count("-") != 1:
        raise CorpusError(f"bitext file name must be <split>.<src>-<tgt>.tsv: {name}")
    src, tgt = parts[1].split("-")
    return parts[0], src, tgt


def load_bitext(path) -> Bitext:
    _, src, tgt = _parse_name(path)
    return Bitext(src, tgt, read_pairs(path))


def save_bitext(bitext: Bitext, directory, split: str = "train") -> Path:
    path = Path(directory) / bitext_filename(split, bitext.src_lang, bitext.tgt_lang)
    write_pairs(path, bitext.pairs)
    return path


def load_eval_set(path) -> EvalSet:
    split, src, tgt = _parse_name(path)
    return EvalSet((src, tgt), split, read_pairs(path))


def save_eval_set(eval_set: EvalSet, directory) -> Path:
    path = Path(directory) / bitext_filename(eval_set.split, *eval_set.direction)
    write_pairs(path, eval_set.pairs)
    return path


def write_mono(corpus: MonoCorpus, directory) -> Path:
    path = Path(directory) / mono_filename(corpus.lang)
    blocks = ["".join(f"{s}\n" for s in doc) for doc in corpus.documents]
    path.write_text("\n".join(blocks), encoding="utf-8")
    return path


def read_mono(path, lang: str | None = None) -> MonoCorpus:
    path = Path(path)
    if lang is None:
        parts = path.name.split(".")
        if len(parts) != 3 or parts[0] != "mono":
            raise CorpusError(f"monolingual file name must be mono.<lang>.txt: {path.name}")
        lang = parts[1]
    docs: list[list[str]] = []
    cur: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.strip():
                cur.append(line)
            elif cur:
                docs.append(cur)
                cur = []
    if cur:
        docs.append(cur)
    return MonoCorpus(lang, docs)


# -- cleaning ------------------------------------------------------------------

def dedup(bitext: Bitext) -> tuple[Bitext, int]:
    """Keep the first occurrence of each normalized (source, target) pair."""
    seen = set()
    kept = []
    for s, t in bitext.pairs:
        key = (normalize(s), normalize(t))
        if key in seen:
            continue
        seen.add(key)
        kept.append((s, t))
    return Bitext(bitext.src_lang, bitext.tgt_lang, kept), len(bitext.pairs) - len(kept)


def _char_ngrams(text: str, n: int):
    for i in range(len(text) - n + 1):
        yield text[i:i + n]


@dataclass
class LidModel:
    """Character n-gram naive Bayes language identifier (orders 1..3, add-one)."""
    langs: tuple[str, ...]
    tables: dict[str, list[dict[str, float]]]
    unseen: dict[str, list[float]]
    log_prior: dict[str, float] = field(default_factory=dict)

    def score(self, text: str) -> dict[str, float]:
        text = normalize(text)
        if not text:
            raise CorpusError("cannot identify the language of empty input")
        padded = f" {text} "
        return {lang: self.log_prior[lang]
                + kernels.char_ngram_score(padded, self.tables[lang], self.unseen[lang])
                for lang in self.langs}

    def classify(self, text: str) -> str:
        scores = self.score(text)
        # max() keeps the first of equal scores; langs are sorted
        return max(self.langs, key=lambda lang: scores[lang])


def train_lid(mono_corpora: Sequence[MonoCorpus]) -> LidModel:
    by_lang: dict[str, list[str]] = {}
    for corpus in mono_corpora:
        sents = [normalize(s) for s in corpus.sentences]
        by_lang.setdefault(corpus.lang, []).extend(s for s in sents if s)
    langs = tuple(sorted(by_lang))
    if len(langs) < 2:
        raise CorpusError(f"language identification needs at least 2 languages, got {list(langs)}")
    for lang in langs:
        if not by_lang[lang]:
            raise CorpusError(f"no sentences for language {lang!r}")

    counts = {lang: [dict() for _ in range(LID_ORDERS)] for lang in langs}
    for lang in langs:
        for s in by_lang[lang]:
            padded = f" {s} "
            for k in range(LID_ORDERS):
                table = counts[lang][k]
                for g in _char_ngrams(padded, k + 1):
                    table[g] = table.get(g, 0) + 1
    # shared event space per order, plus one slot for unseen n-grams
    space = [len({g for lang in langs for g in counts[lang][k]}) + 1 for k in range(LID_ORDERS)]
    tables, unseen = {}, {}
    for lang in langs:
        tables[lang], unseen[lang] = [], []
        for k in range(LID_ORDERS):
            c = counts[lang][k]
            denom = math.log(sum(c.values()) + space[k])
            tables[lang].append({g: math.log(n + 1) - denom for g, n in sorted(c.items())})
            unseen[lang].append(-denom)
    prior = {lang: -math.log(len(langs)) for lang in langs}
    return LidModel(langs, tables, unseen, prior)


def lid_filter(bitext: Bitext, lid: LidModel) -> tuple[Bitext, int]:
    for lang in (bitext.src_lang, bitext.tgt_lang):
        if lang not in lid.langs:
            raise CorpusError(f"language {lang!r} unknown to the language identifier")
    kept = [(s, t) for s, t in bitext.pairs
            if lid.classify(s) == bitext.src_lang and lid.classify(t) == bitext.tgt_lang]
    return Bitext(bitext.src_lang, bitext.tgt_lang, kept), len(bitext.pairs) - len(kept)


def leakage_filter(bitext: Bitext, eval_sets: Sequence[EvalSet]) -> tuple[Bitext, int]:
    """Drop pairs whose source or target matches any eval-side sentence."""
    held = set()
    for es in eval_sets:
        for s, t in es.pairs:
            held.add(normalize(s))
            held.add(normalize(t))
    kept = [(s, t) for s, t in bitext.pairs
            if normalize(s) not in held and normalize(t) not in held]
    return Bitext(bitext.src_lang, bitext.tgt_lang, kept), len(bitext.pairs) - len(kept)


@dataclass
class StageStat:
    stage: str
    direction: str
    kept: int
    removed: int


def clean(bitexts: Sequence[Bitext], lid: LidModel | None,
          eval_sets: Sequence[EvalSet]) -> tuple[list[Bitext], list[StageStat]]:
    """Run dedup -> lid -> leakage on every bitext, recording per-stage counts."""
    out, stats = [], []
    for b in bitexts:
        cur, removed = dedup(b)
        stats.append(StageStat("dedup", b.direction, len(cur), removed))
        if lid is not None:
            cur, removed = lid_filter(cur, lid)
            stats.append(StageStat("lid", b.direction, len(cur), removed))
        cur, removed = leakage_filter(cur, eval_sets)
        stats.append(StageStat("leakage", b.direction, len(cur), removed))
        out.append(cur)
    for st in stats:
        log.info("%s %s kept=%d removed=%d", st.stage, st.direction, st.kept, st.removed)
    return out, stats


def write_stats(stats: Sequence[StageStat], path) -> None:
    lines = ["stage\tdirection\tkept\tremoved\n"]
    lines += [f"{s.stage}\t{s.direction}\t{s.kept}\t{s.removed}\n" for s in stats]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_stats(path) -> list[StageStat]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for row in rows:
        stage, direction, kept, removed = row.split("\t")
        out.append(StageStat(stage, direction, int(kept), int(removed)))
    return out


def discover(directory) -> dict[str, list[Path]]:
    """Group the corpus files of a directory by kind (mono/train/valid/test)."""
    directory = Path(directory)
    found: dict[str, list[Path]] = {"mono": [], "train": [], "valid": [], "test": []}
    for p in sorted(directory.iterdir()):
        if p.name.startswith("mono.") and p.suffix == ".txt":
            found["mono"].append(p)
        elif p.suffix == ".tsv" and p.name.split(".")[0] in SPLITS and p.name.count(".") == 2:
            found[p.name.split(".")[0]].append(p)
    return found
