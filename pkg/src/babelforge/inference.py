"""Beam-search decoding, corpus BLEU, model selection and bucketed reports."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .corpus import EvalSet
from .model import Checkpoint, Params, encode as model_encode
from .vocab import BOS_ID, EOS_ID, MASK_ID, PAD_ID, UNK_ID, VocabError

NEG_INF = -np.inf


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 5
    alpha: float = 1.0
    max_len_a: float = 2.0
    max_len_b: int = 10
    batch_sentences: int = 32

    def __post_init__(self):
        if self.beam < 1:
            raise InferenceError(f"beam must be >= 1, got {self.beam}")

    def max_len_for(self, src_len: int, model_max: int) -> int:
        return max(1, min(int(self.max_len_a * src_len + self.max_len_b), model_max - 1))


@dataclass
class Hypothesis:
    tokens: list[int]      # generated ids, forced language token excluded, eos included if finished
    logprob: float
    score: float

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS_ID


def length_penalized(logprob: float, length: int, alpha: float) -> float:
    return logprob / (length ** alpha)


# -- incremental decoder ---------------------------------------------------------------

class Translator:
    """Eval-mode decoder with cached keys/values, reading a checkpoint read-only."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self.cfg = ckpt.config
        self.vocab = ckpt.vocab
        self.p = ckpt.params
        tie = self.cfg.tie_embeddings
        self.dec_tok = self.p["embed_tokens" if tie else "decoder.embed_tokens"]
        self.out_tok = self.p["embed_tokens" if tie else "output_projection"]
        allowed = np.ones(self.vocab.size, dtype=bool)
        allowed[[PAD_ID, BOS_ID, UNK_ID, MASK_ID]] = False
        allowed[self.vocab.lang_block_start:] = False
        self.blocked = ~allowed

    def lang_id(self, code: str) -> int:
        try:
            return self.vocab.lang_id(code)
        except VocabError as e:
            raise InferenceError(str(e)) from None

    def _ln(self, x, name, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc * (1.0 / np.sqrt(var + eps)) * self.p[name + ".weight"] + self.p[name + ".bias"]

    def _lin(self, x, name):
        return x @ self.p[name + ".weight"] + self.p[name + ".bias"]

    def _split(self, x):
        R, T, d = x.shape
        H = self.cfg.heads
        return x.reshape(R, T, H, d // H).transpose(0, 2, 1, 3)

    def encode(self, srcs: Sequence[Sequence[int]]):
        lengths = np.array([len(s) for s in srcs], dtype=np.int64)
        if lengths.max() > self.cfg.max_len:
            raise InferenceError(f"source length {lengths.max()} exceeds max_len {self.cfg.max_len}")
        ids = np.full((len(srcs), int(lengths.max())), PAD_ID, dtype=np.int64)
        for i, s in enumerate(srcs):
            ids[i, :len(s)] = s
        with ad.no_grad():
            enc = model_encode(Params.wrap(self.p), self.cfg, ids, lengths).data
        return enc, lengths

    def start(self, enc, lengths):
        """Per-layer cross-attention keys/values and empty self-attention caches."""
        state = {"cross": [], "self": [], "t": 0}
        S = enc.shape[1]
        mask = np.where(np.arange(S)[None, :] < lengths[:, None], 0.0, -1e9).astype(enc.dtype)
        state["cross_mask"] = mask[:, None, None, :]
        for i in range(self.cfg.layers):
            p = f"decoder.layers.{i}.cross_attn"
            state["cross"].append((self._split(self._lin(enc, p + ".k_proj")),
                                   self._split(self._lin(enc, p + ".v_proj"))))
            state["self"].append(None)
        return state

    @staticmethod
    def reorder(state, rows):
        rows = np.asarray(rows)
        out = {"t": state["t"], "cross_mask": state["cross_mask"][rows]}
        out["cross"] = [(k[rows], v[rows]) for k, v in state["cross"]]
        out["self"] = [None if c is None else (c[0][rows], c[1][rows]) for c in state["self"]]
        return out

    def _attend(self, q, k, v, mask):
        dh = q.shape[-1]
        s = (q @ k.transpose(0, 1, 3, 2)) * np.float32(1.0 / math.sqrt(dh))
        if mask is not None:
            s = s + mask
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        w = e / e.sum(axis=-1, keepdims=True)
        ctx = w @ v
        R, H, T, _ = ctx.shape
        return ctx.transpose(0, 2, 1, 3).reshape(R, T, H * dh)

    def step(self, state, tokens):
        """Log-probabilities (R, V) for the next token after feeding ``tokens``."""
        t = state["t"]
        if t >= self.cfg.max_len:
            raise InferenceError("decoder ran past max_len")
        cfg = self.cfg
        x = self.dec_tok[np.asarray(tokens)][:, None, :] * np.float32(math.sqrt(cfg.d_model))
        x = x + self.p["decoder.embed_positions"][t]
        for i in range(cfg.layers):
            p = f"decoder.layers.{i}"
            y = self._ln(x, p + ".self_attn_ln")
            q = self._split(self._lin(y, p + ".self_attn.q_proj"))
            k = self._split(self._lin(y, p + ".self_attn.k_proj"))
            v = self._split(self._lin(y, p + ".self_attn.v_proj"))
            if state["self"][i] is not None:
                k = np.concatenate([state["self"][i][0], k], axis=2)
                v = np.concatenate([state["self"][i][1], v], axis=2)
            state["self"][i] = (k, v)
            x = x + self._lin(self._attend(q, k, v, None), p + ".self_attn.out_proj")
            y = self._ln(x, p + ".cross_attn_ln")
            q = self._split(self._lin(y, p + ".cross_attn.q_proj"))
            ck, cv = state["cross"][i]
            x = x + self._lin(self._attend(q, ck, cv, state["cross_mask"]), p + ".cross_attn.out_proj")
            y = self._ln(x, p + ".ffn_ln")
            h = np.maximum(self._lin(y, p + ".ffn.fc1"), 0)
            x = x + self._lin(h, p + ".ffn.fc2")
        x = self._ln(x, "decoder.final_ln")[:, 0, :]
        logits = x @ self.out_tok.T
        state["t"] = t + 1
        return ad.log_softmax_np(logits.astype(np.float64))


def _augment_src(translator: Translator, ids, src_lang):
    return [translator.lang_id(src_lang), *ids, EOS_ID]


def beam_search_batch(translator: Translator, sources: Sequence[Sequence[int]], src_lang: str,
                      tgt_lang: str, beam: int = 5, alpha: float = 1.0,
                      max_len: int | Sequence[int] | None = None,
                      decode: DecodeConfig | None = None) -> list[Hypothesis]:
    """Beam search over several sentences at once; each is independent."""
    if beam < 1:
        raise InferenceError(f"beam must be >= 1, got {beam}")
    n = len(sources)
    if n == 0:
        return []
    src_tok = translator.lang_id(src_lang)
    tgt_tok = translator.lang_id(tgt_lang)
    srcs = [[src_tok, *s, EOS_ID] for s in sources]
    if max_len is None:
        decode = decode or DecodeConfig()
        limits = [decode.max_len_for(len(s), translator.cfg.max_len) for s in srcs]
    elif isinstance(max_len, int):
        limits = [max_len] * n
    else:
        limits = list(max_len)
    if min(limits) < 1:
        raise InferenceError("max_len must be >= 1")
    if max(limits) > translator.cfg.max_len - 1:
        raise InferenceError(f"max_len {max(limits)} leaves no room below model max_len {translator.cfg.max_len}")
    enc, lengths = translator.encode(srcs)
    state = translator.start(enc, lengths)
    V = translator.vocab.size
    blocked = translator.blocked

    # live beams as flat rows; owner[r] is the sentence index
    owner = np.arange(n)
    prefixes: list[list[int]] = [[] for _ in range(n)]
    scores = np.zeros(n)
    last = np.full(n, tgt_tok)
    finished: list[list[Hypothesis]] = [[] for _ in range(n)]
    step = 0
    while owner.size:
        step += 1
        logp = translator.step(state, last)
        logp[:, blocked] = NEG_INF
        cand = scores[:, None] + logp
        keep_rows, keep_tok, keep_score = [], [], []
        for s in np.unique(owner):
            rows = np.flatnonzero(owner == s)
            flat = cand[rows].reshape(-1)
            k = min(beam, int(np.isfinite(flat).sum()))
            # stable ordering: higher score first, then lower (row, token) index
            top = np.lexsort((np.arange(flat.size), -flat))[:k]
            for idx in top:
                r, tok = rows[idx // V], int(idx % V)
                sc = float(flat[idx])
                toks = prefixes[r] + [tok]
                if tok == EOS_ID:
                    finished[s].append(Hypothesis(toks, sc, length_penalized(sc, len(toks), alpha)))
                elif step >= limits[s]:
                    finished[s].append(Hypothesis(toks, sc, length_penalized(sc, len(toks), alpha)))
                else:
                    keep_rows.append(r)
                    keep_tok.append(tok)
                    keep_score.append(sc)
        if not keep_rows:
            break
        new_prefixes = [prefixes[r] + [t] for r, t in zip(keep_rows, keep_tok)]
        owner = owner[keep_rows]
        state = Translator.reorder(state, keep_rows)
        prefixes = new_prefixes
        scores = np.array(keep_score)
        last = np.array(keep_tok)
    # eos-terminated and max_len-truncated hypotheses compete on one scale;
    # ties go to the earlier one
    return [max(finished[s], key=lambda h: h.score) for s in range(n)]


def beam_search(ckpt_or_translator, src_ids: Sequence[int], src_lang: str, tgt_lang: str,
                beam: int = 5, alpha: float = 1.0, max_len: int | None = None) -> Hypothesis:
    tr = ckpt_or_translator if isinstance(ckpt_or_translator, Translator) else Translator(ckpt_or_translator)
    return beam_search_batch(tr, [list(src_ids)], src_lang, tgt_lang, beam, alpha, max_len)[0]


def greedy(ckpt_or_translator, src_ids: Sequence[int], src_lang: str, tgt_lang: str,
           max_len: int, alpha: float = 1.0) -> Hypothesis:
    """Stepwise argmax decoding, stopping at eos or max_len."""
    tr = ckpt_or_translator if isinstance(ckpt_or_translator, Translator) else Translator(ckpt_or_translator)
    enc, lengths = tr.encode([[tr.lang_id(src_lang), *src_ids, EOS_ID]])
    state = tr.start(enc, lengths)
    tok, toks, lp = tr.lang_id(tgt_lang), [], 0.0
    for _ in range(max_len):
        logp = tr.step(state, [tok])[0]
        logp[tr.blocked] = NEG_INF
        tok = int(np.argmax(logp))
        lp += float(logp[tok])
        toks.append(tok)
        if tok == EOS_ID:
            break
    return Hypothesis(toks, lp, length_penalized(lp, len(toks), alpha))


def translate(ckpt: Checkpoint, sentences: Sequence[str], src_lang: str, tgt_lang: str,
              decode: DecodeConfig | None = None, translator: Translator | None = None) -> list[str]:
    decode = decode or DecodeConfig()
    tr = translator or Translator(ckpt)
    vocab = tr.vocab
    out: list[str] = []
    encoded = [vocab.encode(s) for s in sentences]
    # length-sorted chunks keep padding low; results return in input order
    order = sorted(range(len(encoded)), key=lambda i: (len(encoded[i]), i))
    hyps: dict[int, str] = {}
    for lo in range(0, len(order), decode.batch_sentences):
        idx = order[lo:lo + decode.batch_sentences]
        res = beam_search_batch(tr, [encoded[i] for i in idx], src_lang, tgt_lang,
                                decode.beam, decode.alpha, decode=decode)
        for i, h in zip(idx, res):
            hyps[i] = vocab.decode(h.tokens)
    out = [hyps[i] for i in range(len(encoded))]
    return out


# -- BLEU ----------------------------------------------------------------------------

def _ngrams(tokens, n) -> Counter:
    return Counter(kernels.ngram_counts(list(tokens), n))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    @property
    def precisions(self) -> list[float]:
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    @property
    def brevity_penalty(self) -> float:
        if self.hyp_len >= self.ref_len:
            return 1.0
        if self.hyp_len == 0:
            return 0.0
        return math.exp(1.0 - self.ref_len / self.hyp_len)

    @property
    def score(self) -> float:
        if any(m == 0 for m in self.matches):
            return 0.0
        logp = sum(math.log(p) for p in self.precisions) / len(self.matches)
        return 100.0 * self.brevity_penalty * math.exp(logp)


def bleu_stats(hypotheses, references, max_n: int = 4) -> BleuStats:
    if len(hypotheses) == 0:
        raise InferenceError("corpus_bleu needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise InferenceError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return BleuStats(matches, totals, hyp_len, ref_len)


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] over token lists (strings are whitespace-split)."""
    hyps = [h.split() if isinstance(h, str) else h for h in hypotheses]
    refs = [r.split() if isinstance(r, str) else r for r in references]
    return bleu_stats(hyps, refs, max_n).score


# -- evaluation / selection ------------------------------------------------------------

@dataclass
class EvalResult:
    direction: tuple[str, str]
    bleu: float
    hypotheses: list[str]


def hyp_filename(eval_set: EvalSet) -> str:
    return f"{eval_set.split}.{eval_set.src_lang}-{eval_set.tgt_lang}.hyp.txt"


def evaluate(ckpt: Checkpoint, eval_set: EvalSet, decode: DecodeConfig | None = None,
             out_dir=None, hypotheses: Sequence[str] | None = None,
             translator: Translator | None = None) -> EvalResult:
    """Decode every source (unless ``hypotheses`` are injected) and score BLEU."""
    if hypotheses is None:
        for lang in eval_set.direction:
            if not ckpt.vocab.has_lang(lang):
                raise InferenceError(f"language {lang!r} not in checkpoint vocabulary")
        hypotheses = translate(ckpt, eval_set.sources, eval_set.src_lang, eval_set.tgt_lang,
                               decode, translator)
    hypotheses = list(hypotheses)
    score = corpus_bleu(hypotheses, eval_set.references)
    if out_dir is not None:
        path = Path(out_dir) / hyp_filename(eval_set)
        path.write_text("".join(h + "\n" for h in hypotheses), encoding="utf-8")
    return EvalResult(eval_set.direction, score, hypotheses)


def select_best(checkpoints: Sequence[Checkpoint], valid_sets, decode: DecodeConfig | None = None) -> Checkpoint:
    """Highest mean validation BLEU; ties go to the larger update_count."""
    if not checkpoints:
        raise InferenceError("select_best needs at least one checkpoint")
    if isinstance(valid_sets, EvalSet):
        valid_sets = [valid_sets]
    if len(checkpoints) == 1:
        return checkpoints[0]
    best, best_key = None, None
    for ck in checkpoints:
        tr = Translator(ck)
        bleu = float(np.mean([evaluate(ck, vs, decode, translator=tr).bleu for vs in valid_sets]))
        key = (bleu, ck.update_count)
        if best_key is None or key >= best_key:
            best, best_key = ck, key
    return best


# -- bucketed reports -----------------------------------------------------------------

@dataclass(frozen=True)
class Bucket:
    label: str
    lo: float           # inclusive
    hi: float           # exclusive

    def contains(self, size: float) -> bool:
        return self.lo <= size < self.hi


def assign_buckets(sizes: dict, buckets: Sequence[Bucket]) -> dict:
    out = {}
    for d, size in sizes.items():
        hits = [b.label for b in buckets if b.contains(size)]
        if len(hits) != 1:
            raise InferenceError(f"direction {d} with size {size} falls in {len(hits)} buckets")
        out[d] = hits[0]
    return out


@dataclass
class EvalReport:
    results: dict            # system -> direction -> BLEU
    baseline: str
    bucket_of: dict          # direction -> bucket label
    bucket_order: list[str]
    rows: dict = field(default_factory=dict)   # system -> {bucket|All: (mean delta, n)}

    def delta(self, system: str, bucket: str = "All") -> float:
        return self.rows[system][bucket][0]

    def to_tsv(self) -> str:
        lines = ["system\tbucket\tdelta\tn_directions\n"]
        for system, row in self.rows.items():
            for b in [*self.bucket_order, "All"]:
                if b in row:
                    d, n = row[b]
                    lines.append(f"{system}\t{b}\t{d:.2f}\t{n}\n")
        return "".join(lines)

    def to_text(self) -> str:
        cols = [b for b in self.bucket_order if any(b in r for r in self.rows.values())] + ["All"]
        head = ["System"] + cols
        body = []
        for system, row in self.rows.items():
            body.append([system] + [f"{row[c][0]:+.2f}" if c in row else "-" for c in cols])
        counts = ["# directions"] + [str(next(iter(self.rows.values()))[c][1])
                                     if self.rows and c in next(iter(self.rows.values())) else "0"
                                     for c in cols]
        table = [head, counts] + body
        widths = [max(len(r[i]) for r in table) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        rule = "-" * len(fmt(head))
        title = f"BLEU improvement over {self.baseline}"
        return "\n".join([title, rule, fmt(head), fmt(counts), rule] + [fmt(r) for r in body] + [rule]) + "\n"

    def write(self, directory) -> None:
        directory = Path(directory)
        (directory / "report.tsv").write_text(self.to_tsv(), encoding="utf-8")
        (directory / "report.txt").write_text(self.to_text(), encoding="utf-8")


def bucket_report(results: dict, baseline: str, bucket_of: dict,
                  bucket_order: Sequence[str] | None = None) -> EvalReport:
    """Mean (system - baseline) BLEU per bucket and over all directions.

    ``bucket_of`` maps every direction to its bucket label; the "All" row
    averages over directions, not over bucket means.
    """
    if baseline not in results:
        raise InferenceError(f"baseline system {baseline!r} missing from results")
    directions = list(bucket_of)
    gaps = []
    for system, per_dir in results.items():
        missing = [d for d in directions if d not in per_dir]
        if missing:
            gaps.append(f"{system}: {', '.join(map(str, missing))}")
    if gaps:
        raise InferenceError("missing directions -> " + "; ".join(gaps))
    if bucket_order is None:
        bucket_order = list(dict.fromkeys(bucket_of.values()))
    rows = {}
    for system, per_dir in results.items():
        if system == baseline:
            continue
        deltas = {d: per_dir[d] - results[baseline][d] for d in directions}
        row = {}
        for b in bucket_order:
            members = [deltas[d] for d in directions if bucket_of[d] == b]
            if members:
                row[b] = (float(np.mean(members)), len(members))
        row["All"] = (float(np.mean(list(deltas.values()))), len(deltas))
        rows[system] = row
    if len(results) == 1:
        row = {b: (0.0, sum(1 for d in directions if bucket_of[d] == b)) for b in bucket_order}
        row["All"] = (0.0, len(directions))
        rows[baseline] = row
    return EvalReport(results, baseline, dict(bucket_of), list(bucket_order), rows)
