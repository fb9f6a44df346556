"""Noising for denoising pretraining: span masking and sentence permutation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vocab import EOS_ID, MASK_ID, Vocabulary


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    mask_ratio: float = 0.35
    span_lambda: float = 3.5
    permute_sentences: bool = True
    mask_id: int = MASK_ID

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise NoiseError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if not self.span_lambda > 0:
            raise NoiseError(f"span_lambda must be positive, got {self.span_lambda}")


@dataclass
class SpanPlan:
    spans: list[tuple[int, int]]   # (start, length), non-overlapping
    inserts: list[int]             # gap indices receiving a lone mask

    @property
    def masked(self) -> int:
        return sum(length for _, length in self.spans)


def plan_spans(n: int, cfg: NoiseConfig, rng: np.random.Generator) -> SpanPlan:
    """Choose masked spans covering exactly floor(mask_ratio * n) tokens.

    Span lengths are Poisson(span_lambda), clipped to what is still needed
    and to the longest unmasked run; a zero draw inserts a lone mask as long
    as the output stays no longer than the input.
    """
    goal = int(math.floor(cfg.mask_ratio * n + 1e-9))
    covered = np.zeros(n, dtype=bool)
    spans: list[tuple[int, int]] = []
    inserts: list[int] = []
    masked = 0
    while masked < goal:
        length = int(rng.poisson(cfg.span_lambda))
        if length == 0:
            out_len = n - masked + len(spans) + len(inserts)
            if out_len + 1 > n:
                continue
            gaps = _free_gaps(covered)
            inserts.append(int(gaps[rng.integers(len(gaps))]))
            continue
        length = min(length, goal - masked)
        starts = _valid_starts(covered, length)
        if starts.size == 0:
            length = _longest_run(covered)
            starts = _valid_starts(covered, length)
        s = int(starts[rng.integers(starts.size)])
        covered[s:s + length] = True
        spans.append((s, length))
        masked += length
    spans.sort()
    return SpanPlan(spans, sorted(inserts))


def _free_gaps(covered: np.ndarray) -> np.ndarray:
    # gap g sits before token g; it is free unless it falls strictly inside a span
    n = covered.size
    g = np.arange(n + 1)
    left = np.concatenate([[False], covered])
    right = np.concatenate([covered, [False]])
    return g[~(left & right)]


def _valid_starts(covered: np.ndarray, length: int) -> np.ndarray:
    n = covered.size
    if length > n:
        return np.empty(0, dtype=np.int64)
    free = (~covered).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(free)])
    window = csum[length:] - csum[:-length]
    return np.flatnonzero(window == length)


def _longest_run(covered: np.ndarray) -> int:
    best = cur = 0
    for c in covered:
        cur = 0 if c else cur + 1
        best = max(best, cur)
    return best


def apply_plan(ids: Sequence[int], plan: SpanPlan, mask_id: int) -> list[int]:
    starts = {s: length for s, length in plan.spans}
    inserts: dict[int, int] = {}
    for g in plan.inserts:
        inserts[g] = inserts.get(g, 0) + 1
    out: list[int] = []
    i = 0
    n = len(ids)
    while i <= n:
        out.extend([mask_id] * inserts.get(i, 0))
        if i == n:
            break
        if i in starts:
            out.append(mask_id)
            # a lone mask drawn before a later span covered its gap stays next to it
            out.extend([mask_id] * sum(inserts.get(g, 0) for g in range(i + 1, i + starts[i])))
            i += starts[i]
        else:
            out.append(ids[i])
            i += 1
    return out


def span_mask(ids: Sequence[int], cfg: NoiseConfig, rng: np.random.Generator) -> list[int]:
    """Replace random spans by a single mask token each."""
    ids = list(ids)
    return apply_plan(ids, plan_spans(len(ids), cfg, rng), cfg.mask_id)


def permute_sentences(doc: Sequence[Sequence[int]], rng: np.random.Generator) -> list:
    if len(doc) == 0:
        raise NoiseError("cannot permute an empty document")
    order = rng.permutation(len(doc))
    return [doc[i] for i in order]


def truncate_doc(doc: Sequence[Sequence[int]], max_tokens: int) -> list:
    """Drop whole sentences from the end until the flattened doc fits."""
    out = list(doc)
    while len(out) > 1 and sum(len(s) for s in out) > max_tokens:
        out.pop()
    if out and sum(len(s) for s in out) > max_tokens:
        out = [list(out[0])[:max_tokens]]
    return out


def make_denoise_example(doc: Sequence[Sequence[int]], cfg: NoiseConfig, rng: np.random.Generator,
                         lang: str, vocab: Vocabulary, max_len: int = 256):
    """(g(x) augmented, x augmented) for one document of encoded sentences."""
    if len(doc) == 0 or all(len(s) == 0 for s in doc):
        raise NoiseError("cannot build a denoising example from an empty document")
    doc = truncate_doc(doc, max_len - 2)
    tok = vocab.lang_id(lang)
    target = [tok, *[t for s in doc for t in s], EOS_ID]
    noisy = permute_sentences(doc, rng) if cfg.permute_sentences else list(doc)
    flat = [t for s in noisy for t in s]
    source = [tok, *span_mask(flat, cfg, rng), EOS_ID]
    return source, target
