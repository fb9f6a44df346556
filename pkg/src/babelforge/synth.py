"""ML-toy: synthetic language families with an exact translation oracle.

Every synthetic language is a word-level cipher of a base ("English")
language followed by a deterministic word-order rule.  Languages of one
family share a spelling alphabet, a reorder rule, and most of their lexicon
mapping, so related languages can help each other during multilingual
training.  Each language marks every word with its own suffix character,
which keeps languages separable by a character n-gram identifier.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (Bitext, EvalSet, MonoCorpus, save_bitext, save_eval_set,
                     write_mono)

PIVOT = "en"
REORDER_RULES = ("identity", "swap-adjacent-pairs", "reverse-within-clause")
MIN_WORDS, MAX_WORDS = 3, 12
DOC_SENTENCES = (4, 8)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_FAMILY_ALPHABETS = (
    "αβγδεζηθικλμνξοπρστυφχψω",
    "абвгдежзийклмнопрстуфхцчшщыэюя",
    "աբգդեզէըթժիլխծկհձղճմյնշոչպջռսվտրցւփքօֆ",
    "ႠႡႢႣႤႥႦႧႨႩႪႫႬႭႮႯႰႱႲႳႴႵႶႷႸႹႺႻႼႽႾႿ",
)
_SUFFIXES = "ħŧŋđłþŀœƀƈƌƒɠƙƚɲƥʠɍʂƭʋƴȥ"


class SynthError(ValueError):
    pass


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream for (seed, keys); stable across runs and processes."""
    words = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        digest = hashlib.sha256(str(key).encode("utf-8")).digest()
        words.extend(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence(words))


# -- base language -------------------------------------------------------------

@dataclass(frozen=True)
class BaseLexicon:
    words: tuple[str, ...]
    pos: dict = field(compare=False)  # category -> tuple of words

    def category_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.pos.items()}


def build_lexicon(size: int, seed: int) -> BaseLexicon:
    if size < 12:
        raise SynthError(f"base lexicon needs at least 12 words, got {size}")
    rng = derive_rng(seed, "lexicon")
    words: list[str] = []
    seen = set()
    while len(words) < size:
        n_syl = int(rng.integers(1, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syl))
        if rng.random() < 0.3:
            w += _CONSONANTS[rng.integers(len(_CONSONANTS))]
        if w not in seen:
            seen.add(w)
            words.append(w)
    n_det = max(2, size // 50)
    n_prep = max(2, size // 30)
    n_adv = max(2, size // 10)
    n_adj = max(2, size // 5)
    n_verb = max(2, size // 5)
    cuts = np.cumsum([n_det, n_prep, n_adv, n_adj, n_verb])
    names = ("det", "prep", "adv", "adj", "verb")
    pos, start = {}, 0
    for name, end in zip(names, cuts):
        pos[name] = tuple(words[start:end])
        start = end
    pos["noun"] = tuple(words[start:])
    return BaseLexicon(tuple(words), pos)


def _noun_phrase(lex: BaseLexicon, rng) -> list[str]:
    out = []
    if rng.random() < 0.5:
        out.append(lex.pos["det"][rng.integers(len(lex.pos["det"]))])
    if rng.random() < 0.4:
        out.append(lex.pos["adj"][rng.integers(len(lex.pos["adj"]))])
    out.append(lex.pos["noun"][rng.integers(len(lex.pos["noun"]))])
    return out


def gen_base_sentence(lex: BaseLexicon, rng: np.random.Generator) -> str:
    """subject-verb-object with an optional adverb and prepositional phrase (3..12 words)."""
    words = _noun_phrase(lex, rng)
    words.append(lex.pos["verb"][rng.integers(len(lex.pos["verb"]))])
    words += _noun_phrase(lex, rng)
    r = rng.random()
    if r < 0.3 or r >= 0.9:
        words.append(lex.pos["adv"][rng.integers(len(lex.pos["adv"]))])
    if 0.5 <= r:
        words.append(lex.pos["prep"][rng.integers(len(lex.pos["prep"]))])
        words += _noun_phrase(lex, rng)
    return " ".join(words)


def sentence_capacity(lex: BaseLexicon) -> int:
    """Number of distinct sentences the templates can produce."""
    s = lex.category_sizes()
    np_ = (1 + s["det"]) * (1 + s["adj"]) * s["noun"]
    tail = 1 + s["adv"] + s["prep"] * np_ + s["adv"] * s["prep"] * np_
    return np_ * s["verb"] * np_ * tail


# -- synthetic languages -------------------------------------------------------

def _reorder(words: list[str], rule: str) -> list[str]:
    if rule == "identity":
        return list(words)
    if rule == "swap-adjacent-pairs":
        out = list(words)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    if rule == "reverse-within-clause":
        return words[::-1]
    raise SynthError(f"unknown reorder rule {rule!r}")


@dataclass(frozen=True)
class SynthLangSpec:
    code: str
    family: str
    lexicon_permutation: tuple[int, ...]
    reorder_rule: str
    seed: int
    base_lexicon: tuple[str, ...]
    surface_lexicon: tuple[str, ...]

    def __post_init__(self):
        n = len(self.base_lexicon)
        if sorted(self.lexicon_permutation) != list(range(n)):
            raise SynthError(f"{self.code}: lexicon permutation is not a bijection")
        if len(self.surface_lexicon) != n or len(set(self.surface_lexicon)) != n:
            raise SynthError(f"{self.code}: surface lexicon must have {n} distinct words")
        if self.reorder_rule not in REORDER_RULES:
            raise SynthError(f"unknown reorder rule {self.reorder_rule!r}")

    @property
    def word_map(self) -> dict[str, str]:
        cached = self.__dict__.get("_word_map")
        if cached is None:
            cached = {b: self.surface_lexicon[j]
                      for b, j in zip(self.base_lexicon, self.lexicon_permutation)}
            object.__setattr__(self, "_word_map", cached)
        return cached

    @property
    def inverse_map(self) -> dict[str, str]:
        cached = self.__dict__.get("_inverse_map")
        if cached is None:
            cached = {v: k for k, v in self.word_map.items()}
            object.__setattr__(self, "_inverse_map", cached)
        return cached

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthLangSpec":
        return cls(d["code"], d["family"], tuple(d["lexicon_permutation"]), d["reorder_rule"],
                   int(d["seed"]), tuple(d["base_lexicon"]), tuple(d["surface_lexicon"]))


def identity_spec(lex: BaseLexicon, code: str = PIVOT, seed: int = 0) -> SynthLangSpec:
    n = len(lex.words)
    return SynthLangSpec(code, "base", tuple(range(n)), "identity", seed, lex.words, lex.words)


def derive_translation(spec: SynthLangSpec, base_sentence: str) -> str:
    mapping = spec.word_map
    out = []
    for w in base_sentence.split():
        try:
            out.append(mapping[w])
        except KeyError:
            raise SynthError(f"word {w!r} not in the base lexicon of {spec.code}") from None
    return " ".join(_reorder(out, spec.reorder_rule))


def invert_translation(spec: SynthLangSpec, sentence: str) -> str:
    inv = spec.inverse_map
    words = _reorder(sentence.split(), spec.reorder_rule)  # both rules are involutions
    try:
        return " ".join(inv[w] for w in words)
    except KeyError as exc:
        raise SynthError(f"word {exc.args[0]!r} not in the {spec.code} lexicon") from None


def mapping_agreement(a: SynthLangSpec, b: SynthLangSpec) -> float:
    """Fraction of base words both languages send to the same lexicon entry."""
    same = sum(x == y for x, y in zip(a.lexicon_permutation, b.lexicon_permutation))
    return same / len(a.lexicon_permutation)


def make_family(family: str, codes: Sequence[str], lex: BaseLexicon, seed: int,
                family_index: int = 0, agreement: float = 0.7,
                reorder_rule: str | None = None, suffix_offset: int = 0) -> list[SynthLangSpec]:
    """Related languages: shared alphabet and reorder rule, mostly shared mapping."""
    if not 0.5 <= agreement <= 1.0:
        raise SynthError(f"family agreement must be in [0.5, 1], got {agreement}")
    if family_index >= len(_FAMILY_ALPHABETS):
        raise SynthError(f"at most {len(_FAMILY_ALPHABETS)} families are supported")
    rng = derive_rng(seed, "family", family)
    letters = sorted({ch for w in lex.words for ch in w})
    alphabet = _FAMILY_ALPHABETS[family_index]
    picks = rng.permutation(len(alphabet))[:len(letters)]
    spell = {ch: alphabet[i] for ch, i in zip(letters, picks)}
    stems = ["".join(spell[ch] for ch in w) for w in lex.words]
    if reorder_rule is None:
        reorder_rule = REORDER_RULES[1 + family_index % 2]
    n = len(lex.words)
    base_perm = rng.permutation(n)
    specs = []
    for k, code in enumerate(codes):
        lrng = derive_rng(seed, "lang", code)
        perm = base_perm.copy()
        # half the disagreement budget per member keeps every pair >= agreement
        n_moved = int(round((1.0 - agreement) / 2 * n))
        if n_moved >= 2:
            idx = np.sort(lrng.choice(n, size=n_moved, replace=False))
            perm[idx] = perm[lrng.permutation(idx)]
        suffix = _SUFFIXES[(suffix_offset + k) % len(_SUFFIXES)]
        surface = tuple(s + suffix for s in stems)
        specs.append(SynthLangSpec(code, family, tuple(int(x) for x in perm), reorder_rule,
                                   int(seed), lex.words, surface))
    return specs


# -- benchmark -----------------------------------------------------------------

@dataclass
class MLToyConfig:
    base_lexicon_size: int
    languages: list[SynthLangSpec]
    bucket_sizes: dict[str, int]
    eval_size: int
    seed: int
    mono_docs: int = 200
    pivot_mono_docs: int | None = None

    def __post_init__(self):
        codes = [s.code for s in self.languages]
        if len(set(codes)) != len(codes) or PIVOT in codes:
            raise SynthError(f"language codes must be distinct and differ from {PIVOT!r}: {codes}")
        missing = set(codes) - set(self.bucket_sizes)
        if missing:
            raise SynthError(f"no bucket size for {sorted(missing)}")
        if self.eval_size < 1:
            raise SynthError("eval_size must be positive")

    @property
    def lexicon(self) -> BaseLexicon:
        return build_lexicon(self.base_lexicon_size, self.seed)

    def spec(self, code: str) -> SynthLangSpec:
        if code == PIVOT:
            return identity_spec(self.lexicon, seed=self.seed)
        for s in self.languages:
            if s.code == code:
                return s
        raise SynthError(f"unknown language {code!r}")


def make_mltoy_config(families: dict[str, Sequence[tuple[str, int]]], *, lexicon_size: int = 200,
                      eval_size: int = 200, seed: int = 1, mono_docs: int = 200,
                      pivot_mono_docs: int | None = None, agreement: float = 0.7) -> MLToyConfig:
    """``families`` maps a family tag to its (code, training-pair count) members."""
    lex = build_lexicon(lexicon_size, seed)
    specs, buckets = [], {}
    offset = 0
    for fi, (fam, members) in enumerate(families.items()):
        codes = [c for c, _ in members]
        specs += make_family(fam, codes, lex, seed, family_index=fi, agreement=agreement,
                             suffix_offset=offset)
        offset += len(codes)
        buckets.update({c: int(n) for c, n in members})
    return MLToyConfig(lexicon_size, specs, buckets, eval_size, seed, mono_docs, pivot_mono_docs)


def _distinct_sentences(lex, rng, count, exclude, what):
    out, seen = [], set()
    budget = 20 * count + 1000
    while len(out) < count:
        budget -= 1
        if budget < 0:
            raise SynthError(f"could not draw {count} distinct sentences for {what}")
        s = gen_base_sentence(lex, rng)
        if s in seen or s in exclude:
            continue
        seen.add(s)
        out.append(s)
    return out


@dataclass
class Benchmark:
    config: MLToyConfig
    mono: dict[str, MonoCorpus]
    train: dict[str, Bitext]          # code -> code->en bitext
    valid: dict[str, EvalSet]
    test: dict[str, EvalSet]


def build_benchmark(config: MLToyConfig) -> Benchmark:
    lex = config.lexicon
    capacity = sentence_capacity(lex)
    need = max(config.bucket_sizes.values()) + 2 * config.eval_size
    if need > capacity // 2:
        raise SynthError(f"buckets need {need} distinct sentences; templates allow about {capacity}")
    held = _distinct_sentences(lex, derive_rng(config.seed, "eval"), 2 * config.eval_size,
                               set(), "evaluation")
    valid_base, test_base = held[:config.eval_size], held[config.eval_size:]
    held_set = set(held)
    pivot = identity_spec(lex, seed=config.seed)

    mono, train, valid, test = {}, {}, {}, {}
    for spec in [pivot] + list(config.languages):
        rng = derive_rng(config.seed, "mono", spec.code)
        n_docs = config.mono_docs
        if spec.code == PIVOT and config.pivot_mono_docs is not None:
            n_docs = config.pivot_mono_docs
        docs = []
        for _ in range(n_docs):
            n = int(rng.integers(DOC_SENTENCES[0], DOC_SENTENCES[1] + 1))
            doc = []
            while len(doc) < n:
                s = gen_base_sentence(lex, rng)
                if s not in held_set:
                    doc.append(derive_translation(spec, s))
            docs.append(doc)
        mono[spec.code] = MonoCorpus(spec.code, docs)
    for spec in config.languages:
        code = spec.code
        base = _distinct_sentences(lex, derive_rng(config.seed, "bitext", code),
                                   config.bucket_sizes[code], held_set, code)
        train[code] = Bitext(code, PIVOT, [(derive_translation(spec, s), s) for s in base])
        valid[code] = EvalSet((code, PIVOT), "valid",
                              [(derive_translation(spec, s), s) for s in valid_base])
        test[code] = EvalSet((code, PIVOT), "test",
                             [(derive_translation(spec, s), s) for s in test_base])
    return Benchmark(config, mono, train, valid, test)


def gen_benchmark(config: MLToyConfig, out_dir) -> Benchmark:
    """Write mono/bitext/eval files plus ``mltoy.manifest.tsv`` and language specs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_benchmark(config)
    for corpus in bench.mono.values():
        write_mono(corpus, out)
    for code in bench.train:
        save_bitext(bench.train[code], out, "train")
        save_eval_set(bench.valid[code], out)
        save_eval_set(bench.test[code], out)
    rows = ["language\tfamily\tbucket\ttrain_pairs\tvalid_pairs\ttest_pairs\tmono_docs\tmono_sentences\tseed\n"]
    for spec in [identity_spec(config.lexicon, seed=config.seed)] + list(config.languages):
        code = spec.code
        n_train = len(bench.train[code]) if code in bench.train else 0
        n_valid = len(bench.valid[code].pairs) if code in bench.valid else 0
        n_test = len(bench.test[code].pairs) if code in bench.test else 0
        bucket = config.bucket_sizes.get(code, 0)
        rows.append(f"{code}\t{spec.family}\t{bucket}\t{n_train}\t{n_valid}\t{n_test}\t"
                    f"{len(bench.mono[code].documents)}\t{len(bench.mono[code])}\t{config.seed}\n")
    (out / "mltoy.manifest.tsv").write_text("".join(rows), encoding="utf-8")
    specs = {"seed": config.seed, "base_lexicon_size": config.base_lexicon_size,
             "languages": [s.to_dict() for s in config.languages]}
    (out / "mltoy.languages.json").write_text(json.dumps(specs, ensure_ascii=False, sort_keys=True),
                                              encoding="utf-8")
    return bench


def load_specs(directory) -> dict[str, SynthLangSpec]:
    d = json.loads((Path(directory) / "mltoy.languages.json").read_text(encoding="utf-8"))
    return {s["code"]: SynthLangSpec.from_dict(s) for s in d["languages"]}


def read_manifest(directory) -> list[dict]:
    lines = (Path(directory) / "mltoy.manifest.tsv").read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]
