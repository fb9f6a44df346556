"""Losses, Adam, the learning-rate schedule and the training loop.

Regimes:
  pretrain / continue_pretrain   denoising over monolingual documents
  finetune / scratch             supervised translation over directions
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import EvalSet
from .inference import DecodeConfig, Translator, evaluate
from .model import AdamState, Checkpoint, Params, forward_params, labels_of
from .noise import NoiseConfig, make_denoise_example, truncate_doc
from .sampler import Sampler, collate, encode_directions
from .synth import derive_rng
from .vocab import PAD_ID

log = logging.getLogger(__name__)

REGIMES = ("pretrain", "continue_pretrain", "finetune", "scratch")
DENOISING = ("pretrain", "continue_pretrain")
# desk-scale default update budgets per regime
DEFAULT_UPDATES = {"pretrain": 3000, "continue_pretrain": 2000, "finetune": 2000, "scratch": 4000}


class TrainError(ValueError):
    pass


# -- schedule, clipping, Adam ------------------------------------------------------------

def lr_at(step: int, peak: float, warmup: int) -> float:
    """peak * min(t / warmup, sqrt(warmup / t)) for update t >= 1."""
    if step < 1:
        raise TrainError(f"learning-rate step must be >= 1, got {step}")
    if warmup <= 0:
        return peak
    return peak * min(step / warmup, math.sqrt(warmup / step))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    """Scale gradients so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    factor = max_norm / (norm + 1e-12)
    return {k: (g * factor).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None


def fresh_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(0, {k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState | None, hyper: AdamHyper):
    """One bias-corrected Adam update, in place; clipping happens first."""
    for name, g in grads.items():
        if name not in params:
            raise TrainError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise TrainError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for parameter {name!r}")
    if state is None:
        state = fresh_adam(params)
    grads, _ = clip_grad_norm(grads, hyper.clip_norm)
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        p, m, v = params[name], state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2) + hyper.eps
        upd = np.divide(m / c1, denom, out=np.zeros_like(m), where=denom > 0)
        p -= (hyper.lr * upd).astype(p.dtype, copy=False)
    state.step = t
    return params, state


# -- losses ---------------------------------------------------------------------------

def sequence_loss(P: Params, ckpt_cfg, vocab_size: int, batch, label_smoothing: float,
                  training: bool = False, rng=None):
    logits = forward_params(P, ckpt_cfg, vocab_size, batch, "train" if training else "eval", rng)
    return ad.cross_entropy(logits, labels_of(batch), label_smoothing, PAD_ID)


def translation_loss(ckpt: Checkpoint, batch, label_smoothing: float = 0.0) -> float:
    """Token-mean label-smoothed cross-entropy of y' given x' (eval mode)."""
    with ad.no_grad():
        return float(sequence_loss(Params.wrap(ckpt.params), ckpt.config, ckpt.vocab.size,
                                   batch, label_smoothing).data)


def denoising_loss(ckpt: Checkpoint, batch, label_smoothing: float = 0.0) -> float:
    """Cross-entropy of the original x given g(x); same code path as translation."""
    return translation_loss(ckpt, batch, label_smoothing)


# -- configuration --------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    regime: str
    updates: int
    batch_tokens: int = 1024
    lr: float = 5e-4
    warmup: int = 200
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    temperature: float = 1.5
    seed: int = 1
    validate_every: int = 500
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    valid_sentences: int = 100
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise TrainError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.updates < 0:
            raise TrainError("updates must be >= 0")
        if not self.lr > 0:
            raise TrainError("lr must be positive")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise TrainError("label_smoothing must be in [0, 0.5)")
        if self.batch_tokens < 1 or self.validate_every < 1 or self.log_every < 1:
            raise TrainError("batch_tokens, validate_every and log_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainData:
    """Monolingual documents (denoising regimes) or directions (translation)."""
    mono: dict[str, list[list[str]]] = field(default_factory=dict)
    valid_mono: dict[str, list[list[str]]] = field(default_factory=dict)
    directions: dict[tuple[str, str], list[tuple[str, str]]] = field(default_factory=dict)
    valid: list[EvalSet] = field(default_factory=list)

    def languages(self) -> set[str]:
        langs = set(self.mono) | set(self.valid_mono)
        for s, t in self.directions:
            langs.update((s, t))
        for es in self.valid:
            langs.update(es.direction)
        return langs


def split_valid_docs(docs: Sequence[Sequence[str]], n_valid: int):
    """Hold out the last ``n_valid`` documents for validation."""
    n_valid = min(n_valid, max(len(docs) - 1, 0))
    return list(docs[:len(docs) - n_valid]), list(docs[len(docs) - n_valid:])


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    metrics: list[tuple[int, str, str, str, float]]
    best_update: int
    best_value: float | None


METRIC_HEADER = "updates\tsplit\tdirection\tmetric\tvalue\n"


def write_metrics(rows, path) -> None:
    lines = [METRIC_HEADER] + [f"{u}\t{s}\t{d}\t{m}\t{v:.6f}\n" for u, s, d, m, v in rows]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_metrics(path) -> list[tuple[int, str, str, str, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        u, s, d, m, v = line.split("\t")
        rows.append((int(u), s, d, m, float(v)))
    return rows


# -- data plumbing ------------------------------------------------------------------------

def _encode_docs(docs, vocab, max_tokens):
    out = []
    for doc in docs:
        enc = truncate_doc([vocab.encode(s) for s in doc], max_tokens)
        if any(enc):
            out.append(enc)
    return out


def _denoise_valid_batches(valid_mono, vocab, cfg: TrainConfig, max_len: int):
    """Fixed noised validation batches per language (same noise every time)."""
    out = {}
    for lang in sorted(valid_mono):
        docs = _encode_docs(valid_mono[lang], vocab, max_len - 2)
        if not docs:
            continue
        rng = derive_rng(cfg.seed, "valid-noise", lang)
        examples = [make_denoise_example(d, cfg.noise, rng, lang, vocab, max_len) for d in docs]
        batches, cur, used = [], [], 0
        for ex in examples:
            if cur and used + len(ex[1]) > cfg.batch_tokens:
                batches.append(collate((lang, lang), cur))
                cur, used = [], 0
            cur.append(ex)
            used += len(ex[1])
        if cur:
            batches.append(collate((lang, lang), cur))
        out[lang] = batches
    return out


def _check_languages(ckpt: Checkpoint, data: TrainData):
    missing = sorted(l for l in data.languages() if not ckpt.vocab.has_lang(l))
    if missing:
        raise TrainError(f"checkpoint vocabulary lacks language tokens for {missing}")


def _build_sampler(cfg: TrainConfig, data: TrainData, ckpt: Checkpoint) -> Sampler:
    vocab = ckpt.vocab
    max_len = ckpt.config.max_len
    if cfg.regime in DENOISING:
        if not data.mono:
            raise TrainError(f"{cfg.regime} needs monolingual corpora")
        examples = {(lang, lang): _encode_docs(docs, vocab, max_len - 2)
                    for lang, docs in sorted(data.mono.items())}
        noise_rng = derive_rng(cfg.seed, "noise")

        def transform(direction, doc):
            return make_denoise_example(doc, cfg.noise, noise_rng, direction[0], vocab, max_len)

        def cost(doc):
            return sum(len(s) for s in doc) + 2
        return Sampler(examples, cfg.batch_tokens, cfg.temperature, cfg.seed,
                       transform=transform, cost=cost)
    if not data.directions:
        raise TrainError(f"{cfg.regime} needs translation directions")
    examples = encode_directions(dict(sorted(data.directions.items())), vocab)
    for d, exs in examples.items():
        for s, t in exs:
            if len(s) > max_len or len(t) > max_len:
                raise TrainError(f"{d}: sequence longer than model max_len {max_len}")
    return Sampler(examples, cfg.batch_tokens, cfg.temperature, cfg.seed)


def validate(ckpt: Checkpoint, cfg: TrainConfig, data: TrainData, valid_batches=None) -> dict[str, float]:
    """Per-direction validation metric plus 'all' (mean over directions)."""
    out = {}
    if cfg.regime in DENOISING:
        for lang, batches in (valid_batches or {}).items():
            toks = sum(int((labels_of(b) != PAD_ID).sum()) for b in batches)
            tot = sum(translation_loss(ckpt, b, 0.0) * int((labels_of(b) != PAD_ID).sum()) for b in batches)
            out[f"{lang}-{lang}"] = tot / toks
    else:
        tr = Translator(ckpt)
        for es in data.valid:
            sub = EvalSet(es.direction, es.split, es.pairs[:cfg.valid_sentences])
            out[f"{es.src_lang}-{es.tgt_lang}"] = evaluate(ckpt, sub, cfg.decode, translator=tr).bleu
    if out:
        out["all"] = float(np.mean(list(out.values())))
    return out


# -- training loop --------------------------------------------------------------------

def run_training(cfg: TrainConfig, data: TrainData, init: Checkpoint, out_dir=None,
                 name: str = "model", extra_manifest: dict | None = None) -> TrainResult:
    """sample -> forward -> loss -> backward -> clip -> Adam, ``cfg.updates`` times.

    The optimizer always starts fresh, so finetuning re-warms the schedule.
    Validation runs every ``validate_every`` updates and at the end; the best
    checkpoint is the lowest validation loss (denoising) or highest BLEU.
    """
    _check_languages(init, data)
    metric = "loss" if cfg.regime in DENOISING else "bleu"
    better = (lambda a, b: a <= b) if metric == "loss" else (lambda a, b: a >= b)
    parent_hash = init.hash()
    rows: list[tuple[int, str, str, str, float]] = []

    if cfg.updates == 0:
        result = TrainResult(init, init, rows, init.update_count, None)
        if out_dir is not None:
            _write_outputs(result, cfg, out_dir, name, parent_hash, extra_manifest)
        return result

    ck = init.copy()
    ck.opt_state = None
    ck.provenance = {"op": cfg.regime, "parent": parent_hash, "seed": cfg.seed,
                     "config_hash": cfg.hash(), "optimizer": "fresh"}
    P = Params.wrap(ck.params, requires_grad=True)
    tensors = list(P.values())
    sampler = _build_sampler(cfg, data, ck)
    drop_rng = derive_rng(cfg.seed, "dropout")
    valid_batches = (_denoise_valid_batches(data.valid_mono, ck.vocab, cfg, ck.config.max_len)
                     if cfg.regime in DENOISING else None)
    hyper = AdamHyper(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm)
    state = fresh_adam(ck.params)
    window: list[float] = []
    best, best_value, best_update = None, None, init.update_count

    for t in range(1, cfg.updates + 1):
        batch = sampler.next_batch()
        ad.zero_grad(tensors)
        loss = sequence_loss(P, ck.config, ck.vocab.size, batch, cfg.label_smoothing, True, drop_rng)
        ad.backward(loss, tensors)
        grads = {k: p.grad for k, p in P.items()}
        hyper = AdamHyper(lr_at(t, cfg.lr, cfg.warmup), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm)
        _, state = adam_step(ck.params, grads, state, hyper)
        window.append(float(loss.data))
        ck.update_count = init.update_count + t
        if t % cfg.log_every == 0 or t == cfg.updates:
            rows.append((ck.update_count, "train", "all", "loss", float(np.mean(window))))
            rows.append((ck.update_count, "train", "all", "lr", hyper.lr))
            log.info("update %d loss %.4f lr %.2e", ck.update_count, np.mean(window), hyper.lr)
            window = []
        if t % cfg.validate_every == 0 or t == cfg.updates:
            scores = validate(ck, cfg, data, valid_batches)
            for d, v in scores.items():
                rows.append((ck.update_count, "valid", d, metric, float(v)))
            if scores:
                log.info("update %d valid %s %.4f", ck.update_count, metric, scores["all"])
                if best_value is None or better(scores["all"], best_value):
                    best_value, best_update = scores["all"], ck.update_count
                    best = _snapshot(ck, state)
    ck.opt_state = state
    final = ck.copy()
    if best is None:
        best = final
        best_update = final.update_count
    result = TrainResult(final, best, rows, best_update, best_value)
    if out_dir is not None:
        _write_outputs(result, cfg, out_dir, name, parent_hash, extra_manifest)
    return result


def _snapshot(ck: Checkpoint, state: AdamState) -> Checkpoint:
    snap = ck.copy()
    snap.opt_state = state.copy()
    return snap


def _write_outputs(result: TrainResult, cfg: TrainConfig, out_dir, name, parent_hash, extra):
    from .manifest import thread_count, write_manifest
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    final_hash = result.final.save(out / f"{name}.final.bfckpt")
    best_hash = result.best.save(out / f"{name}.best.bfckpt")
    write_metrics(result.metrics, out / f"{name}.metrics.tsv")
    manifest = {
        "name": name,
        "train_config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "threads": thread_count(),
        "parent_checkpoint": parent_hash,
        "final_checkpoint": final_hash,
        "best_checkpoint": best_hash,
        "best_update": result.best_update,
        "best_value": result.best_value,
        "optimizer": "fresh (schedule re-warmed)",
    }
    manifest.update(extra or {})
    write_manifest(out / f"{name}.manifest.json", manifest)
