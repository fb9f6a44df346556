"""Experiment configuration: an INI file with a fixed schema.

Example::

    [experiment]
    name = demo
    seed = 1

    [dataset]
    families = k:ka=50000,ke=5000,ki=500; t:ta=50000,te=5000,ti=500

    [model]
    preset = toy

    [train.finetune]
    updates = 2000

Every key is type-checked before any work starts and unknown sections or
keys are rejected with their ``section.key`` path.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .inference import Bucket, DecodeConfig
from .model import ModelConfig
from .noise import NoiseConfig
from .train import DEFAULT_UPDATES, REGIMES, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _list(raw: str) -> list[str]:
    return [x.strip() for x in raw.split(",") if x.strip()]


def _opt_int(raw: str):
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _families(raw: str) -> dict[str, list[tuple[str, int]]]:
    """``fam:code=n,code=n; fam:...`` -> {fam: [(code, n), ...]}."""
    out: dict[str, list[tuple[str, int]]] = {}
    for group in raw.split(";"):
        group = group.strip()
        if not group:
            continue
        if ":" not in group:
            raise ValueError(f"family entry {group!r} must look like fam:code=n,...")
        fam, members = group.split(":", 1)
        entries = []
        for m in _list(members):
            code, _, n = m.partition("=")
            entries.append((code.strip(), int(n)))
        if not entries:
            raise ValueError(f"family {fam!r} has no languages")
        out[fam.strip()] = entries
    if not out:
        raise ValueError("no families given")
    return out


def _buckets(raw: str) -> list[Bucket]:
    """``label:lo-hi; ...`` with ``inf`` allowed as the upper bound."""
    out = []
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        label, _, rng = part.rpartition(":")
        lo, _, hi = rng.partition("-")
        out.append(Bucket(label.strip(), float(lo), float("inf") if hi.strip() == "inf" else float(hi)))
    if not out:
        raise ValueError("no buckets given")
    return out


_TRAIN_KEYS = {
    "updates": (int, None), "batch_tokens": (int, 1024), "lr": (float, 5e-4), "warmup": (int, 200),
    "label_smoothing": (float, 0.1), "clip_norm": (float, 1.0), "temperature": (float, 1.5),
    "validate_every": (int, 500), "log_every": (int, 50), "valid_sentences": (int, 100),
    "languages": (_list, None), "valid_docs": (int, 10),
    # multilingual runs train updates x n_directions, matching the total of the bilingual runs
    "per_direction": (_bool, False),
}

SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {"name": (str, "experiment"), "seed": (int, 1)},
    "dataset": {
        "kind": (str, "mltoy"), "path": (str, ""), "families": (_families, None),
        "lexicon_size": (int, 200), "eval_size": (int, 200), "mono_docs": (int, 300),
        "pivot_mono_docs": (_opt_int, None), "agreement": (float, 0.7),
    },
    "prep": {"lid": (_bool, True)},
    "vocab": {"size": (int, 1200), "languages": (_list, None), "piece_languages": (_list, None),
              "extra_languages": (_list, [])},
    "noise": {"mask_ratio": (float, 0.35), "span_lambda": (float, 3.5), "permute_sentences": (_bool, True)},
    "model": {"preset": (str, "toy"), "dropout": (float, 0.1), "max_len": (int, 256),
              "tie_embeddings": (_bool, True), "layers": (_opt_int, None), "d_model": (_opt_int, None),
              "heads": (_opt_int, None), "ffn_dim": (_opt_int, None),
              # bilingual from-scratch baselines above the threshold use the larger preset
              "scratch_large_preset": (str, "small"), "scratch_large_threshold": (int, 5000)},
    "decode": {"beam": (int, 5), "alpha": (float, 1.0), "max_len_a": (float, 2.0), "max_len_b": (int, 10),
               "batch_sentences": (int, 32)},
    "report": {"buckets": (_buckets, "high:10000-inf; medium:1000-10000; low:0-1000"),
               "baseline": (str, "BL-Scratch")},
}
for _regime in REGIMES:
    SCHEMA[f"train.{_regime}"] = dict(_TRAIN_KEYS)


@dataclass
class ExperimentConfig:
    values: dict[str, dict]
    text: str

    # -- typed views -------------------------------------------------------------
    @property
    def name(self) -> str:
        return self.values["experiment"]["name"]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    def section(self, name: str) -> dict:
        return self.values[name]

    def model_config(self, preset: str | None = None) -> ModelConfig:
        m = self.values["model"]
        dims = {k: m[k] for k in ("layers", "d_model", "heads", "ffn_dim") if m[k] is not None}
        return ModelConfig.preset(preset or m["preset"], dropout=m["dropout"], max_len=m["max_len"],
                                  tie_embeddings=m["tie_embeddings"], **dims)

    def scratch_model_config(self, train_pairs: int) -> ModelConfig:
        """Capacity grows with data: the larger preset above the threshold."""
        m = self.values["model"]
        if train_pairs > m["scratch_large_threshold"]:
            return self.model_config(m["scratch_large_preset"])
        return self.model_config()

    def noise_config(self) -> NoiseConfig:
        n = self.values["noise"]
        return NoiseConfig(n["mask_ratio"], n["span_lambda"], n["permute_sentences"])

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(**self.values["decode"])

    def train_config(self, regime: str, seed_offset: int = 0, n_directions: int = 1) -> TrainConfig:
        t = dict(self.values[f"train.{regime}"])
        t.pop("languages")
        t.pop("valid_docs")
        if t["updates"] is None:
            t["updates"] = DEFAULT_UPDATES[regime]
        if t.pop("per_direction"):
            t["updates"] *= n_directions
        return TrainConfig(regime=regime, seed=self.seed + seed_offset, noise=self.noise_config(),
                           decode=self.decode_config(), **t)

    def buckets(self) -> list[Bucket]:
        return self.values["report"]["buckets"]

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_jsonable(), sort_keys=True).encode()).hexdigest()[:16]

    def to_jsonable(self) -> dict:
        return json.loads(json.dumps(self.values, default=lambda o: o.__dict__ if hasattr(o, "__dict__") else str(o)))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}".replace("\n", " ")) from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r}")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    values: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    val = conv(raw)
                except (ValueError, TypeError) as e:
                    raise ConfigError(f"{section}.{key}: invalid value {raw!r} ({e})") from None
            else:
                val = conv(default) if isinstance(default, str) and conv is not str else default
            values[section][key] = val
    cfg = ExperimentConfig(values, text)
    _check(cfg)
    return cfg


def _check(cfg: ExperimentConfig) -> None:
    ds = cfg.values["dataset"]
    if ds["kind"] not in ("mltoy", "files"):
        raise ConfigError(f"dataset.kind: expected mltoy or files, got {ds['kind']!r}")
    if ds["kind"] == "mltoy" and ds["families"] is None:
        raise ConfigError("dataset.families: required for kind = mltoy")
    if ds["kind"] == "files" and not ds["path"]:
        raise ConfigError("dataset.path: required for kind = files")
    try:
        cfg.model_config()
        cfg.model_config(cfg.values["model"]["scratch_large_preset"])
        cfg.noise_config()
        cfg.decode_config()
        for regime in REGIMES:
            cfg.train_config(regime)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
