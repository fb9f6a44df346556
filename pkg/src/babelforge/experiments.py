"""Named end-to-end experiments behind ``babelforge repro``.

trend-low-resource
    Pretrain on all ML-toy languages, then compare multilingual finetuning
    (N->1), bilingual finetuning and bilingual from-scratch training at
    matched update budgets, bucketed by training-set size.
extension-no-regression
    Pretrain with three language tokens, extend to six, continue
    pretraining, and compare bilingual finetuning of the original
    languages from both checkpoints.

``scale="quick"`` shrinks data, model and budgets for smoke tests; the
pipeline and artifacts are the same.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .cli import (Workspace, collect_scores, stage_eval, stage_extend, stage_finetune,
                  stage_prep, stage_pretrain, stage_report, stage_synth, stage_vocab)
from .config import parse_config
from .inference import EvalReport

log = logging.getLogger(__name__)

FAMILIES = "k:ka=50000,ke=5000,ki=500; t:ta=50000,te=5000,ti=500"
BUCKETS = "50k:10000-inf; 5k:1000-10000; 500:0-1000"

_BASE = {
    "experiment": {"seed": "1"},
    "dataset": {"kind": "mltoy", "families": FAMILIES, "lexicon_size": "200", "eval_size": "200",
                "mono_docs": "300", "pivot_mono_docs": "900", "agreement": "0.7"},
    "vocab": {"size": "1200"},
    "model": {"preset": "toy", "dropout": "0.1", "max_len": "256",
              # the larger scratch preset does not fit the single-core budget
              "scratch_large_preset": "toy"},
    "decode": {"beam": "5", "alpha": "1.0"},
    "train.pretrain": {"updates": "3000", "batch_tokens": "512", "lr": "0.001", "warmup": "300",
                       "validate_every": "1000", "log_every": "100"},
    "train.continue_pretrain": {"updates": "2000", "batch_tokens": "512", "lr": "0.0005", "warmup": "200",
                                "validate_every": "1000", "log_every": "100"},
    "train.finetune": {"updates": "1500", "batch_tokens": "512", "lr": "0.0005", "warmup": "200",
                       "validate_every": "1000", "log_every": "100", "valid_sentences": "50",
                       "per_direction": "true"},
    "train.scratch": {"updates": "1500", "batch_tokens": "512", "lr": "0.0005", "warmup": "200",
                      "validate_every": "1000", "log_every": "100", "valid_sentences": "50",
                      "per_direction": "true"},
    "report": {"buckets": BUCKETS, "baseline": "BL-Scratch"},
}

_QUICK = {
    "dataset": {"families": "k:ka=400,ke=120,ki=40; t:ta=400,te=120,ti=40", "lexicon_size": "80",
                "eval_size": "20", "mono_docs": "30", "pivot_mono_docs": "60"},
    "vocab": {"size": "300"},
    "model": {"layers": "1", "d_model": "32", "heads": "2", "ffn_dim": "64", "max_len": "128"},
    "decode": {"beam": "2"},
    "train.pretrain": {"updates": "12", "batch_tokens": "256", "warmup": "4", "validate_every": "6",
                       "log_every": "4"},
    "train.continue_pretrain": {"updates": "8", "batch_tokens": "256", "warmup": "4", "validate_every": "4",
                                "log_every": "4"},
    "train.finetune": {"updates": "8", "batch_tokens": "256", "warmup": "4", "validate_every": "4",
                       "log_every": "4", "valid_sentences": "10"},
    "train.scratch": {"updates": "8", "batch_tokens": "256", "warmup": "4", "validate_every": "4",
                      "log_every": "4", "valid_sentences": "10"},
    "report": {"buckets": "big:300-inf; mid:100-300; low:0-100"},
}

_SPECIFIC = {
    "trend-low-resource": {"experiment": {"name": "trend-low-resource"}},
    "extension-no-regression": {
        "experiment": {"name": "extension-no-regression"},
        "vocab": {"languages": "en,ka,ta", "extra_languages": "ke,te,ki"},
        "train.pretrain": {"languages": "en,ka,ta"},
        "train.continue_pretrain": {"languages": "en,ka,ta,ke,te,ki"},
        "report": {"baseline": "BL-FT-orig"},
    },
}

EXPERIMENTS = tuple(_SPECIFIC)


def _merge(*layers) -> dict:
    out: dict[str, dict] = {}
    for layer in layers:
        for section, kv in layer.items():
            out.setdefault(section, {}).update(kv)
    return out


def render_ini(sections: dict) -> str:
    lines = []
    for section, kv in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in kv.items())
        lines.append("")
    return "\n".join(lines)


def experiment_config_text(name: str, scale: str = "full") -> str:
    if name not in _SPECIFIC:
        raise ValueError(f"unknown experiment {name!r}; expected one of {list(EXPERIMENTS)}")
    if scale not in ("full", "quick"):
        raise ValueError(f"unknown scale {scale!r}")
    layers = [_BASE, _QUICK] if scale == "quick" else [_BASE]
    return render_ini(_merge(*copy.deepcopy(layers), _SPECIFIC[name]))


@dataclass
class ExperimentResult:
    name: str
    workdir: Path
    scores: dict               # system -> direction -> test BLEU
    reports: dict[str, EvalReport] = field(default_factory=dict)
    seconds: float = 0.0


def _low_resource_langs(ws: Workspace) -> list[str]:
    return [code for fam in ws.cfg.section("dataset")["families"].values() for code, _ in fam]


def run_trend(ws: Workspace) -> ExperimentResult:
    t0 = time.time()
    stage_synth(ws)
    stage_prep(ws)
    stage_vocab(ws)
    pre = stage_pretrain(ws)
    langs = _low_resource_langs(ws)
    ml = stage_finetune(ws, ml=True, topology="n2one", init_path=pre)
    stage_eval(ws, ml, "ML-FT")
    for lang in langs:
        d = f"{lang}-en"
        bl = stage_finetune(ws, bl=d, init_path=pre)
        stage_eval(ws, bl, "BL-FT")
        sc = stage_finetune(ws, bl=d, scratch=True)
        stage_eval(ws, sc, "BL-Scratch")
    reports = {
        "report": stage_report(ws, "BL-Scratch", ["ML-FT", "BL-FT"]),
    }
    ws_vs = stage_report(ws, "BL-FT", ["ML-FT"], name="report-vs-blft")
    reports["report-vs-blft"] = ws_vs
    return ExperimentResult(ws.cfg.name, ws.root, collect_scores(ws), reports, time.time() - t0)


def run_extension(ws: Workspace) -> ExperimentResult:
    t0 = time.time()
    stage_synth(ws)
    stage_prep(ws)
    stage_vocab(ws)
    pre = stage_pretrain(ws)
    ext = stage_extend(ws, pre)
    cont = stage_pretrain(ws, init_path=ext, name="continue")
    originals = [l for l in ws.cfg.section("vocab")["languages"] if l != "en"]
    for lang in originals:
        d = f"{lang}-en"
        a = stage_finetune(ws, bl=d, init_path=pre, name=f"BL-FT-orig.{d}")
        stage_eval(ws, a, "BL-FT-orig")
        b = stage_finetune(ws, bl=d, init_path=cont, name=f"BL-FT-ext.{d}")
        stage_eval(ws, b, "BL-FT-ext")
    reports = {"report": stage_report(ws, "BL-FT-orig", ["BL-FT-ext"])}
    return ExperimentResult(ws.cfg.name, ws.root, collect_scores(ws), reports, time.time() - t0)


def run_experiment(name: str, workdir=None, scale: str = "full") -> ExperimentResult:
    cfg = parse_config(experiment_config_text(name, scale), f"<{name}>")
    ws = Workspace(cfg, workdir or Path("runs") / (name if scale == "full" else f"{name}-{scale}"))
    log.info("repro %s (%s) in %s", name, scale, ws.root)
    if name == "trend-low-resource":
        return run_trend(ws)
    return run_extension(ws)
