"""Command-line entry point: ``babelforge <command> -c <config> [-w <workdir>]``.

One experiment lives in one directory::

    data/raw/      synth output (or a copy of dataset.path)
    data/clean/    cleaned corpora and prep.stats.tsv
    vocab/         vocab.txt
    pretrain/      model.{best,final}.bfckpt, model.metrics.tsv
    extend/        extended checkpoint (and continue-pretraining runs)
    finetune/<run>/
    eval/<system>/ hypotheses and scores.tsv
    report/        report.tsv, report.txt, curves.png

Every stage directory carries a ``manifest.json`` with the config hash,
seeds, thread count and output checksums.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config
from .corpus import (Bitext, EvalSet, clean, discover, load_bitext, load_eval_set, read_mono,
                     save_bitext, save_eval_set, train_lid, write_mono, write_stats)
from .inference import (DecodeConfig, Translator, assign_buckets, bucket_report, evaluate,
                        translate)
from .manifest import apply_thread_cap, checksums, read_manifest, thread_count, write_manifest
from .model import Checkpoint, extend_embeddings, init_model
from .sampler import TOPOLOGIES, build_many_to_many
from .synth import derive_rng, gen_benchmark, make_mltoy_config
from .train import TrainData, read_metrics, run_training, split_valid_docs
from .vocab import Vocabulary, build_vocab

log = logging.getLogger("babelforge")


class CliError(ValueError):
    pass


# -- dataset helpers ------------------------------------------------------------------

class Dataset:
    """Corpora of one data directory, grouped by kind."""

    def __init__(self, directory):
        self.dir = Path(directory)
        if not self.dir.is_dir():
            raise CliError(f"data directory not found: {self.dir} (run the previous stage first)")
        found = discover(self.dir)
        self.mono = {m.lang: m for m in (read_mono(p) for p in found["mono"])}
        self.train = [load_bitext(p) for p in found["train"]]
        self.valid = [load_eval_set(p) for p in found["valid"]]
        self.test = [load_eval_set(p) for p in found["test"]]

    def bitext(self, src: str, tgt: str) -> Bitext:
        for b in self.train:
            if (b.src_lang, b.tgt_lang) == (src, tgt):
                return b
            if (b.tgt_lang, b.src_lang) == (src, tgt):
                return b.reversed()
        raise CliError(f"no training bitext for {src}-{tgt} in {self.dir}")

    def eval_set(self, split: str, src: str, tgt: str) -> EvalSet:
        for es in (self.valid if split == "valid" else self.test):
            if es.direction == (src, tgt):
                return es
            if es.direction == (tgt, src):
                return EvalSet((src, tgt), split, [(t, s) for s, t in es.pairs])
        raise CliError(f"no {split} set for {src}-{tgt} in {self.dir}")

    def train_size(self, direction) -> int:
        return len(self.bitext(*direction))


def _parse_direction(text: str) -> tuple[str, str]:
    parts = text.split("-")
    if len(parts) != 2 or not all(parts):
        raise CliError(f"direction must look like src-tgt, got {text!r}")
    return parts[0], parts[1]


# -- stage bookkeeping ----------------------------------------------------------------

class Workspace:
    def __init__(self, cfg: ExperimentConfig, root):
        self.cfg = cfg
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        copy = self.root / "config.ini"
        if not copy.exists() or copy.read_text(encoding="utf-8") != cfg.text:
            copy.write_text(cfg.text, encoding="utf-8")

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def raw(self):
        return self.path("data", "raw")

    @property
    def clean(self):
        return self.path("data", "clean")

    @property
    def vocab_file(self):
        return self.path("vocab", "vocab.txt")

    def load_vocab(self) -> Vocabulary:
        if not self.vocab_file.exists():
            raise CliError(f"vocabulary not found: {self.vocab_file} (run `babelforge vocab` first)")
        return Vocabulary.load(self.vocab_file)

    def up_to_date(self, stage_dir: Path, key: dict) -> bool:
        mf = stage_dir / "manifest.json"
        if not mf.exists():
            return False
        try:
            old = read_manifest(mf)
        except ValueError:
            return False
        if old.get("stage_key") != key:
            return False
        return all((stage_dir / name).exists() for name in old.get("checksums", {}))

    def finish(self, stage_dir: Path, stage: str, key: dict, extra: dict | None = None) -> None:
        body = {
            "stage": stage,
            "stage_key": key,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "threads": thread_count(),
            "version": __version__,
            "checksums": checksums(stage_dir),
        }
        body.update(extra or {})
        write_manifest(stage_dir / "manifest.json", body)


def _load_ckpt(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CliError(f"parent checkpoint not found: {path}")
    return Checkpoint.load(path)


# -- stages -------------------------------------------------------------------------------

def stage_synth(ws: Workspace, force=False) -> Path:
    ds = ws.cfg.section("dataset")
    out = ws.raw
    key = {"stage": "synth", "dataset": ws.cfg.to_jsonable()["dataset"], "seed": ws.cfg.seed}
    if not force and ws.up_to_date(out, key):
        log.info("synth: up to date")
        return out
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    if ds["kind"] == "files":
        src = Path(ds["path"])
        if not src.is_dir():
            raise CliError(f"dataset.path is not a directory: {src}")
        for p in sorted(src.iterdir()):
            if p.is_file():
                shutil.copyfile(p, out / p.name)
    else:
        mcfg = make_mltoy_config(ds["families"], lexicon_size=ds["lexicon_size"], eval_size=ds["eval_size"],
                                 seed=ws.cfg.seed, mono_docs=ds["mono_docs"],
                                 pivot_mono_docs=ds["pivot_mono_docs"], agreement=ds["agreement"])
        gen_benchmark(mcfg, out)
    ws.finish(out, "synth", key)
    return out


def stage_prep(ws: Workspace, force=False) -> Path:
    raw = Dataset(ws.raw)
    out = ws.clean
    key = {"stage": "prep", "input": checksums(ws.raw), "lid": ws.cfg.section("prep")["lid"]}
    if not force and ws.up_to_date(out, key):
        log.info("prep: up to date")
        return out
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    lid = train_lid(list(raw.mono.values())) if ws.cfg.section("prep")["lid"] else None
    cleaned, stats = clean(raw.train, lid, raw.valid + raw.test)
    for b in cleaned:
        save_bitext(b, out, "train")
    for es in raw.valid + raw.test:
        save_eval_set(es, out)
    for m in raw.mono.values():
        write_mono(m, out)
    for extra in sorted(ws.raw.glob("mltoy.*")):
        shutil.copyfile(extra, out / extra.name)
    write_stats(stats, out / "prep.stats.tsv")
    removed = sum(s.removed for s in stats)
    ws.finish(out, "prep", key, {"removed_pairs": removed})
    log.info("prep: removed %d pairs", removed)
    return out


def stage_vocab(ws: Workspace, force=False) -> Path:
    data = Dataset(ws.clean)
    vc = ws.cfg.section("vocab")
    langs = vc["languages"] or sorted(data.mono)
    piece_langs = vc["piece_languages"] or sorted(data.mono)
    missing = [l for l in piece_langs if l not in data.mono]
    if missing:
        raise CliError(f"no monolingual data for vocab.piece_languages {missing}")
    out = ws.vocab_file.parent
    key = {"stage": "vocab", "input": checksums(ws.clean), "vocab": ws.cfg.to_jsonable()["vocab"]}
    if not force and ws.up_to_date(out, key):
        log.info("vocab: up to date")
        return ws.vocab_file
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab([data.mono[l] for l in piece_langs], vc["size"], langs)
    vocab.save(ws.vocab_file)
    ws.finish(out, "vocab", key, {"size": vocab.size, "languages": list(vocab.lang_codes)})
    return ws.vocab_file


def _mono_split(ws, data: Dataset, langs, valid_docs):
    mono, valid = {}, {}
    for lang in langs:
        if lang not in data.mono:
            raise CliError(f"no monolingual data for {lang!r}")
        mono[lang], valid[lang] = split_valid_docs(data.mono[lang].documents, valid_docs)
    return mono, valid


def stage_pretrain(ws: Workspace, init_path=None, name=None, force=False) -> Path:
    """Denoising pretraining from random init, or continued pretraining from ``init_path``."""
    data = Dataset(ws.clean)
    regime = "continue_pretrain" if init_path else "pretrain"
    tc = ws.cfg.train_config(regime)
    section = ws.cfg.section(f"train.{regime}")
    if init_path:
        init = _load_ckpt(init_path)
    else:
        vocab = ws.load_vocab()
        init = init_model(ws.cfg.model_config(), vocab, derive_rng(ws.cfg.seed, "init", "pretrain"),
                          {"seed": ws.cfg.seed})
    langs = section["languages"] or [l for l in init.vocab.lang_codes if l in data.mono]
    out = ws.path(name or ("pretrain" if regime == "pretrain" else "continue"))
    key = {"stage": regime, "train": tc.hash(), "parent": init.hash(), "languages": langs,
           "input": checksums(ws.clean)}
    if not force and ws.up_to_date(out, key):
        log.info("%s: up to date", regime)
        return out / "model.best.bfckpt"
    mono, valid = _mono_split(ws, data, langs, section["valid_docs"])
    res = run_training(tc, TrainData(mono=mono, valid_mono=valid), init, out_dir=out, name="model")
    _plot_run(out / "model.metrics.tsv", out / "curves.png")
    ws.finish(out, regime, key, {"languages": langs, "best_update": res.best_update})
    return out / "model.best.bfckpt"


def stage_extend(ws: Workspace, init_path=None, languages=None, force=False) -> Path:
    init_path = Path(init_path or ws.path("pretrain", "model.best.bfckpt"))
    ck = _load_ckpt(init_path)
    langs = languages if languages is not None else ws.cfg.section("vocab")["extra_languages"]
    out = ws.path("extend")
    key = {"stage": "extend", "parent": ck.hash(), "languages": list(langs)}
    if not force and ws.up_to_date(out, key):
        log.info("extend: up to date")
        return out / "extended.bfckpt"
    out.mkdir(parents=True, exist_ok=True)
    ext_vocab = ck.vocab.extend_languages(langs)
    ext = extend_embeddings(ck, ext_vocab, derive_rng(ws.cfg.seed, "extend"))
    ext.save(out / "extended.bfckpt")
    ext_vocab.save(out / "vocab.txt")
    ws.finish(out, "extend", key, {"parent_checkpoint": ck.hash(), "added_languages": list(langs)})
    return out / "extended.bfckpt"


def _valid_sets(data: Dataset, directions):
    return [data.eval_set("valid", s, t) for s, t in directions]


def stage_finetune(ws: Workspace, *, bl=None, ml=False, scratch=False, topology="n2one",
                   init_path=None, name=None, force=False) -> Path:
    if bool(bl) == bool(ml):
        raise CliError("finetune needs exactly one of --bl SRC-TGT or --ml")
    if topology not in TOPOLOGIES:
        raise CliError(f"unknown topology {topology!r}")
    data = Dataset(ws.clean)
    if ml:
        directions = build_many_to_many(data.train, topology)
        default_name = f"{'ML-SC' if scratch else 'ML-FT'}.{topology}"
    else:
        d = _parse_direction(bl)
        directions = {d: list(data.bitext(*d).pairs)}
        default_name = f"{'BL-Scratch' if scratch else 'BL-FT'}.{d[0]}-{d[1]}"
    regime = "scratch" if scratch else "finetune"
    tc = ws.cfg.train_config(regime, n_directions=len(directions))
    if scratch:
        vocab = ws.load_vocab()
        pairs = max(len(p) for p in directions.values())
        mcfg = ws.cfg.scratch_model_config(pairs) if not ml else ws.cfg.model_config()
        init = init_model(mcfg, vocab, derive_rng(ws.cfg.seed, "init", default_name), {"seed": ws.cfg.seed})
    else:
        init = _load_ckpt(init_path or ws.path("pretrain", "model.best.bfckpt"))
    out = ws.path("finetune", name or default_name)
    dir_list = sorted(directions)
    key = {"stage": regime, "train": tc.hash(), "parent": init.hash(),
           "directions": [f"{s}-{t}" for s, t in dir_list], "input": checksums(ws.clean)}
    if not force and ws.up_to_date(out, key):
        log.info("finetune %s: up to date", out.name)
        return out / "model.best.bfckpt"
    train_data = TrainData(directions=directions, valid=_valid_sets(data, dir_list))
    res = run_training(tc, train_data, init, out_dir=out, name="model",
                       extra_manifest={"directions": [f"{s}-{t}" for s, t in dir_list]})
    _plot_run(out / "model.metrics.tsv", out / "curves.png")
    ws.finish(out, regime, key, {"directions": [f"{s}-{t}" for s, t in dir_list],
                                 "topology": topology if ml else "bilingual",
                                 "best_update": res.best_update})
    return out / "model.best.bfckpt"


def _read_scores(path: Path) -> dict[tuple[str, str], float]:
    out = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines()[1:]:
            split, direction, bleu = line.split("\t")
            out[(split, direction)] = float(bleu)
    return out


def _write_scores(path: Path, scores: dict) -> None:
    lines = ["split\tdirection\tbleu\n"] + [f"{s}\t{d}\t{b:.4f}\n" for (s, d), b in sorted(scores.items())]
    path.write_text("".join(lines), encoding="utf-8")


def stage_eval(ws: Workspace, ckpt_path, system: str, directions=None, split="test", force=False) -> dict:
    data = Dataset(ws.clean)
    ckpt_path = Path(ckpt_path)
    ck = _load_ckpt(ckpt_path)
    if directions is None:
        run_mf = ckpt_path.parent / "manifest.json"
        if run_mf.exists() and "directions" in read_manifest(run_mf):
            directions = [_parse_direction(d) for d in read_manifest(run_mf)["directions"]]
        else:
            raise CliError("eval needs --directions when the checkpoint has no run manifest")
    out = ws.path("eval", system)
    out.mkdir(parents=True, exist_ok=True)
    decode = ws.cfg.decode_config()
    scores = _read_scores(out / "scores.tsv")
    tr = Translator(ck)
    results = {}
    for d in directions:
        es = data.eval_set(split, *d)
        res = evaluate(ck, es, decode, out_dir=out, translator=tr)
        scores[(split, f"{d[0]}-{d[1]}")] = res.bleu
        results[d] = res.bleu
        log.info("eval %s %s-%s %s BLEU %.2f", system, d[0], d[1], split, res.bleu)
    _write_scores(out / "scores.tsv", scores)
    ws.finish(out, "eval", {"stage": "eval", "system": system}, {"checkpoint": ck.hash()})
    return results


def collect_scores(ws: Workspace, split="test") -> dict[str, dict[str, float]]:
    results = {}
    root = ws.path("eval")
    if root.exists():
        for sysdir in sorted(p for p in root.iterdir() if p.is_dir()):
            scores = _read_scores(sysdir / "scores.tsv")
            per = {d: b for (s, d), b in scores.items() if s == split}
            if per:
                results[sysdir.name] = per
    return results


def stage_report(ws: Workspace, baseline=None, systems=None, split="test", name="report"):
    data = Dataset(ws.clean)
    baseline = baseline or ws.cfg.section("report")["baseline"]
    results = collect_scores(ws, split)
    if systems:
        results = {k: v for k, v in results.items() if k in set(systems) | {baseline}}
    if baseline not in results:
        raise CliError(f"no {split} scores for baseline system {baseline!r} under {ws.path('eval')}")
    directions = sorted(results[baseline])
    sizes = {d: data.train_size(_parse_direction(d)) for d in directions}
    buckets = ws.cfg.buckets()
    bucket_of = assign_buckets(sizes, buckets)
    report = bucket_report(results, baseline, bucket_of, [b.label for b in buckets])
    out = ws.path(name)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out)
    lines = ["system\tdirection\tbucket\ttrain_pairs\tbleu\n"]
    for system in sorted(results):
        for d in directions:
            lines.append(f"{system}\t{d}\t{bucket_of[d]}\t{sizes[d]}\t{results[system][d]:.4f}\n")
    (out / "bleu.tsv").write_text("".join(lines), encoding="utf-8")
    _plot_all(ws, out / "curves.png")
    ws.finish(out, "report", {"stage": "report", "baseline": baseline}, {"baseline": baseline})
    return report


# -- plots ----------------------------------------------------------------------------------

def _plot_run(metrics_path: Path, png: Path) -> None:
    if metrics_path.exists():
        _plot_curves({metrics_path.parent.name: read_metrics(metrics_path)}, png)


def _plot_all(ws: Workspace, png: Path) -> None:
    runs = {}
    for mp in sorted(ws.root.rglob("model.metrics.tsv")):
        runs[str(mp.parent.relative_to(ws.root))] = read_metrics(mp)
    _plot_curves(runs, png)


def _plot_curves(runs: dict, png: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    for label, rows in runs.items():
        tr = [(u, v) for u, s, d, m, v in rows if s == "train" and m == "loss"]
        va = [(u, v) for u, s, d, m, v in rows if s == "valid" and d == "all"]
        if tr:
            ax1.plot(*zip(*tr), label=label)
        if va:
            ax2.plot(*zip(*va), marker="o", label=label)
    ax1.set_xlabel("updates")
    ax1.set_ylabel("train loss")
    ax2.set_xlabel("updates")
    ax2.set_ylabel("validation (loss or BLEU)")
    for ax in (ax1, ax2):
        if ax.lines:
            ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(png, dpi=80, metadata={"Software": None})
    plt.close(fig)


# -- argument parsing ------------------------------------------------------------------

def _workspace(args) -> Workspace:
    if not args.config:
        raise CliError("missing -c/--config")
    cfg = load_config(args.config)
    root = args.workdir or Path("runs") / cfg.name
    return Workspace(cfg, root)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="babelforge", description="multilingual seq2seq laboratory")
    p.add_argument("--version", action="version", version=f"babelforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", required=True, help="experiment config (INI)")
        sp.add_argument("-w", "--workdir", type=Path, help="experiment directory (default runs/<name>)")
        sp.add_argument("--force", action="store_true", help="rerun even if up to date")

    common(sub.add_parser("synth", help="generate the synthetic benchmark"))
    common(sub.add_parser("prep", help="dedup / language-id / leakage cleaning"))
    common(sub.add_parser("vocab", help="build the subword vocabulary"))
    sp = sub.add_parser("pretrain", help="denoising pretraining (continued with --init)")
    common(sp)
    sp.add_argument("--init", type=Path, help="continue pretraining from this checkpoint")
    sp.add_argument("--name", help="output directory name")
    sp = sub.add_parser("extend", help="add language tokens and embedding rows")
    common(sp)
    sp.add_argument("--init", type=Path)
    sp.add_argument("--languages", help="comma-separated new language codes")
    sp = sub.add_parser("finetune", help="bilingual or multilingual finetuning")
    common(sp)
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--bl", metavar="SRC-TGT", help="bilingual direction")
    mode.add_argument("--ml", action="store_true", help="multilingual over all bitexts")
    sp.add_argument("--scratch", action="store_true", help="random init instead of a pretrained checkpoint")
    sp.add_argument("--topology", default="n2one", choices=TOPOLOGIES)
    sp.add_argument("--init", type=Path)
    sp.add_argument("--name")
    sp = sub.add_parser("translate", help="decode a file of sentences")
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("-i", "--input", type=Path, required=True)
    sp.add_argument("-o", "--output", type=Path, required=True)
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp = sub.add_parser("eval", help="decode and score an evaluation split")
    common(sp)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--system", required=True)
    sp.add_argument("--directions", help="comma-separated src-tgt list (default: the run's)")
    sp.add_argument("--split", default="test", choices=("valid", "test"))
    sp = sub.add_parser("report", help="bucketed BLEU deltas against a baseline")
    common(sp)
    sp.add_argument("--baseline")
    sp.add_argument("--systems", help="comma-separated systems (default: all evaluated)")
    sp.add_argument("--split", default="test", choices=("valid", "test"))
    sp = sub.add_parser("repro", help="run a named experiment end to end")
    sp.add_argument("name")
    sp.add_argument("-w", "--workdir", type=Path)
    sp.add_argument("--scale", default="full", choices=("full", "quick"))
    return p


def dispatch(args) -> None:
    cmd = args.command
    if cmd == "translate":
        ck = _load_ckpt(args.ckpt)
        if not args.input.exists():
            raise CliError(f"input file not found: {args.input}")
        lines = args.input.read_text(encoding="utf-8").splitlines()
        hyps = translate(ck, lines, args.src, args.tgt, DecodeConfig(beam=args.beam, alpha=args.alpha))
        args.output.write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
        return
    if cmd == "repro":
        from .experiments import run_experiment
        run_experiment(args.name, args.workdir, scale=args.scale)
        return
    ws = _workspace(args)
    if cmd == "synth":
        stage_synth(ws, args.force)
    elif cmd == "prep":
        stage_prep(ws, args.force)
    elif cmd == "vocab":
        stage_vocab(ws, args.force)
    elif cmd == "pretrain":
        stage_pretrain(ws, args.init, args.name, args.force)
    elif cmd == "extend":
        langs = [x.strip() for x in args.languages.split(",") if x.strip()] if args.languages else None
        stage_extend(ws, args.init, langs, args.force)
    elif cmd == "finetune":
        stage_finetune(ws, bl=args.bl, ml=args.ml, scratch=args.scratch, topology=args.topology,
                       init_path=args.init, name=args.name, force=args.force)
    elif cmd == "eval":
        dirs = [_parse_direction(d) for d in args.directions.split(",")] if args.directions else None
        stage_eval(ws, args.ckpt, args.system, dirs, args.split)
    elif cmd == "report":
        systems = args.systems.split(",") if args.systems else None
        report = stage_report(ws, args.baseline, systems, args.split)
        sys.stdout.write(report.to_text())


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        apply_thread_cap()
        dispatch(args)
    except (ValueError, OSError, KeyError) as e:
        msg = str(e).replace("\n", " ")
        sys.stderr.write(f"babelforge: error: {type(e).__name__}: {msg}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
