"""Transformer encoder-decoder, checkpoints and embedding-table extension.

Pre-norm layers, learned positions, and (by default) one embedding matrix
shared by the encoder input, decoder input and output projection.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import PAD_ID, Vocabulary

MAGIC = b"BFCKPT"
FORMAT_VERSION = 1
MASK_VALUE = -1e9


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 128
    heads: int = 4
    ffn_dim: int = 512
    dropout: float = 0.1
    max_len: int = 256
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if min(self.layers, self.d_model, self.heads, self.ffn_dim, self.max_len) < 1:
            raise ModelError("model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ModelError(f"unknown model preset {name!r}; expected one of {sorted(PRESETS)}")
        return replace(PRESETS[name], **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "toy": ModelConfig(2, 128, 4, 512),
    "small": ModelConfig(5, 512, 8, 2048),
    "big": ModelConfig(6, 1024, 16, 4096),
}


# -- parameter layout ---------------------------------------------------------------

def _attn_shapes(prefix, d):
    out = {}
    for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
        out[f"{prefix}.{proj}.weight"] = (d, d)
        out[f"{prefix}.{proj}.bias"] = (d,)
    return out


def _ln_shapes(prefix, d):
    return {f"{prefix}.weight": (d,), f"{prefix}.bias": (d,)}


def _ffn_shapes(prefix, d, f):
    return {f"{prefix}.fc1.weight": (d, f), f"{prefix}.fc1.bias": (f,),
            f"{prefix}.fc2.weight": (f, d), f"{prefix}.fc2.bias": (d,)}


def param_shapes(cfg: ModelConfig, vocab_size: int) -> dict[str, tuple]:
    """Canonical parameter names and shapes, in initialization order."""
    d, f = cfg.d_model, cfg.ffn_dim
    shapes: dict[str, tuple] = {}
    if cfg.tie_embeddings:
        shapes["embed_tokens"] = (vocab_size, d)
    else:
        shapes["encoder.embed_tokens"] = (vocab_size, d)
        shapes["decoder.embed_tokens"] = (vocab_size, d)
        shapes["output_projection"] = (vocab_size, d)
    shapes["encoder.embed_positions"] = (cfg.max_len, d)
    shapes["decoder.embed_positions"] = (cfg.max_len, d)
    for i in range(cfg.layers):
        p = f"encoder.layers.{i}"
        shapes.update(_ln_shapes(f"{p}.self_attn_ln", d))
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes.update(_ln_shapes(f"{p}.ffn_ln", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, f))
    shapes.update(_ln_shapes("encoder.final_ln", d))
    for i in range(cfg.layers):
        p = f"decoder.layers.{i}"
        shapes.update(_ln_shapes(f"{p}.self_attn_ln", d))
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes.update(_ln_shapes(f"{p}.cross_attn_ln", d))
        shapes.update(_attn_shapes(f"{p}.cross_attn", d))
        shapes.update(_ln_shapes(f"{p}.ffn_ln", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, f))
    shapes.update(_ln_shapes("decoder.final_ln", d))
    return shapes


def embedding_names(cfg: ModelConfig) -> tuple[str, ...]:
    if cfg.tie_embeddings:
        return ("embed_tokens",)
    return ("encoder.embed_tokens", "decoder.embed_tokens", "output_projection")


def _init_param(name: str, shape, d_model: int, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("embed_tokens") or name == "output_projection" or name.endswith("embed_positions"):
        return rng.normal(0.0, d_model ** -0.5, size=shape).astype(np.float32)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=np.float32)
    if "_ln." in name or name.endswith("final_ln.weight"):
        return np.ones(shape, dtype=np.float32)
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# -- checkpoint ----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    params: dict[str, np.ndarray]
    opt_state: AdamState | None = None
    update_count: int = 0
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        expected = param_shapes(self.config, self.vocab.size)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise CheckpointError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()},
                          self.opt_state.copy() if self.opt_state else None,
                          self.update_count, json.loads(json.dumps(self.provenance)),
                          self.format_version)

    def to_bytes(self) -> bytes:
        return _serialize(self)

    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return _deserialize(path.read_bytes())

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def same_weights(self, other: "Checkpoint") -> bool:
        return (self.config == other.config and self.vocab == other.vocab
                and self.params.keys() == other.params.keys()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def _serialize(ck: Checkpoint) -> bytes:
    tensors, blobs, offset = [], [], 0

    def add(kind, name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"kind": kind, "name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name in param_shapes(ck.config, ck.vocab.size):
        add("param", name, ck.params[name])
    opt = None
    if ck.opt_state is not None:
        opt = {"step": ck.opt_state.step}
        for name in param_shapes(ck.config, ck.vocab.size):
            add("adam_m", name, ck.opt_state.m[name])
            add("adam_v", name, ck.opt_state.v[name])
    header = {
        "config": ck.config.to_dict(),
        "vocab": ck.vocab.to_text(),
        "update_count": ck.update_count,
        "provenance": ck.provenance,
        "optimizer": opt,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HQ", ck.format_version, len(hbytes)))
    buf.write(hbytes)
    for b in blobs:
        buf.write(b)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def _deserialize(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 10 + 32 or not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt or truncated)")
    version, hlen = struct.unpack_from("<HQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    start = len(MAGIC) + 10
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for t in header["tensors"]:
        raw = body[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(t["shape"])
        arrays[t["kind"]][t["name"]] = arr
    opt = None
    if header["optimizer"] is not None:
        opt = AdamState(int(header["optimizer"]["step"]), arrays["adam_m"], arrays["adam_v"])
    return Checkpoint(ModelConfig.from_dict(header["config"]), Vocabulary.from_text(header["vocab"]),
                      arrays["param"], opt, int(header["update_count"]), header["provenance"], version)


def init_model(config: ModelConfig, vocab: Vocabulary, rng: np.random.Generator,
               provenance: dict | None = None) -> Checkpoint:
    params = {name: _init_param(name, shape, config.d_model, rng)
              for name, shape in param_shapes(config, vocab.size).items()}
    prov = {"op": "init", "parent": None}
    prov.update(provenance or {})
    return Checkpoint(config, vocab, params, None, 0, prov)


def param_count(config: ModelConfig, vocab_size: int) -> int:
    return int(sum(math.prod(s) for s in param_shapes(config, vocab_size).values()))


def extend_embeddings(ckpt: Checkpoint, extended_vocab: Vocabulary, rng: np.random.Generator) -> Checkpoint:
    """Append rows for new language tokens; every existing value is kept as is."""
    if not extended_vocab.is_extension_of(ckpt.vocab):
        raise ModelError("vocabulary is not a language-token extension of the checkpoint's")
    added = extended_vocab.size - ckpt.vocab.size
    d = ckpt.config.d_model
    params = {k: v.copy() for k, v in ckpt.params.items()}
    for name in embedding_names(ckpt.config):
        new_rows = rng.normal(0.0, d ** -0.5, size=(added, d)).astype(np.float32)
        params[name] = np.concatenate([params[name], new_rows], axis=0)
    prov = {"op": "extend", "parent": ckpt.hash(),
            "added_languages": list(extended_vocab.lang_codes[len(ckpt.vocab.lang_codes):])}
    # optimizer moments have the old row count; the continued run starts fresh
    return Checkpoint(ckpt.config, extended_vocab, params, None, ckpt.update_count, prov)


# -- forward pass ---------------------------------------------------------------------

class Params(dict):
    """Name -> Tensor view of a checkpoint's arrays (shared storage)."""

    @classmethod
    def wrap(cls, arrays: dict[str, np.ndarray], requires_grad: bool = False, dtype=None) -> "Params":
        out = cls()
        for k, v in arrays.items():
            data = v if dtype is None else v.astype(dtype)
            out[k] = Tensor(data, requires_grad=requires_grad, name=k)
        return out


def _linear(x, P, prefix):
    return ad.add(ad.matmul(x, P[prefix + ".weight"]), P[prefix + ".bias"])


def _ln(x, P, prefix):
    return ad.layer_norm(x, P[prefix + ".weight"], P[prefix + ".bias"])


def _attention(P, prefix, q_in, kv_in, mask, heads):
    B, Tq, d = q_in.shape
    Tk = kv_in.shape[1]
    dh = d // heads
    q = ad.transpose(ad.reshape(_linear(q_in, P, prefix + ".q_proj"), (B, Tq, heads, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(_linear(kv_in, P, prefix + ".k_proj"), (B, Tk, heads, dh)), (0, 2, 3, 1))
    v = ad.transpose(ad.reshape(_linear(kv_in, P, prefix + ".v_proj"), (B, Tk, heads, dh)), (0, 2, 1, 3))
    scores = ad.add(ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh)), mask)
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
    return _linear(ctx, P, prefix + ".out_proj")


def _ffn(x, P, prefix):
    return _linear(ad.relu(_linear(x, P, prefix + ".fc1")), P, prefix + ".fc2")


def _embed(P, cfg, name_tok, name_pos, ids, dropout_rng, training):
    T = ids.shape[1]
    x = ad.scale(ad.embedding(P[name_tok], ids), math.sqrt(cfg.d_model))
    x = ad.add(x, ad.slice_rows(P[name_pos], slice(0, T)))
    return ad.dropout(x, cfg.dropout, dropout_rng, training)


def key_mask(lengths, T: int, dtype) -> np.ndarray:
    """(B, 1, 1, T) additive mask hiding key positions at or beyond each length."""
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, MASK_VALUE).astype(dtype)[:, None, None, :]


def causal_mask(T: int, dtype) -> np.ndarray:
    return np.triu(np.full((T, T), MASK_VALUE, dtype=dtype), k=1)[None, None]


def _tok_names(cfg):
    if cfg.tie_embeddings:
        return "embed_tokens", "embed_tokens", "embed_tokens"
    return "encoder.embed_tokens", "decoder.embed_tokens", "output_projection"


def encode(P, cfg: ModelConfig, src_ids, src_lengths, training=False, rng=None):
    dtype = P["encoder.final_ln.weight"].dtype
    enc_tok, _, _ = _tok_names(cfg)
    x = _embed(P, cfg, enc_tok, "encoder.embed_positions", src_ids, rng, training)
    mask = Tensor(key_mask(src_lengths, src_ids.shape[1], dtype))
    for i in range(cfg.layers):
        p = f"encoder.layers.{i}"
        y = _ln(x, P, p + ".self_attn_ln")
        h = _attention(P, p + ".self_attn", y, y, mask, cfg.heads)
        x = ad.add(x, ad.dropout(h, cfg.dropout, rng, training))
        h = _ffn(_ln(x, P, p + ".ffn_ln"), P, p + ".ffn")
        x = ad.add(x, ad.dropout(h, cfg.dropout, rng, training))
    return _ln(x, P, "encoder.final_ln")


def decode(P, cfg: ModelConfig, enc_out, src_lengths, dec_ids, training=False, rng=None):
    """Decoder over teacher-forced inputs; returns logits (B, T, V)."""
    dtype = P["decoder.final_ln.weight"].dtype
    _, dec_tok, out_tok = _tok_names(cfg)
    T = dec_ids.shape[1]
    x = _embed(P, cfg, dec_tok, "decoder.embed_positions", dec_ids, rng, training)
    self_mask = Tensor(causal_mask(T, dtype))
    cross_mask = Tensor(key_mask(src_lengths, enc_out.shape[1], dtype))
    for i in range(cfg.layers):
        p = f"decoder.layers.{i}"
        y = _ln(x, P, p + ".self_attn_ln")
        h = _attention(P, p + ".self_attn", y, y, self_mask, cfg.heads)
        x = ad.add(x, ad.dropout(h, cfg.dropout, rng, training))
        h = _attention(P, p + ".cross_attn", _ln(x, P, p + ".cross_attn_ln"), enc_out, cross_mask, cfg.heads)
        x = ad.add(x, ad.dropout(h, cfg.dropout, rng, training))
        h = _ffn(_ln(x, P, p + ".ffn_ln"), P, p + ".ffn")
        x = ad.add(x, ad.dropout(h, cfg.dropout, rng, training))
    x = _ln(x, P, "decoder.final_ln")
    return ad.matmul(x, ad.transpose(P[out_tok], (1, 0)))


def check_batch(cfg: ModelConfig, vocab_size: int, src_ids, dec_ids):
    for name, ids in (("source", src_ids), ("target", dec_ids)):
        if ids.shape[1] > cfg.max_len:
            raise ModelError(f"{name} length {ids.shape[1]} exceeds max_len {cfg.max_len}")
        if ids.size and (ids.max() >= vocab_size or ids.min() < 0):
            raise ModelError(f"{name} token id outside vocabulary of size {vocab_size}")


def forward_params(P, cfg: ModelConfig, vocab_size: int, batch, mode: str = "eval", rng=None):
    """Logits (rows, tgt_len - 1, V) for decoder input y'[:-1] of ``batch``."""
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be train or eval, got {mode!r}")
    training = mode == "train"
    dec_ids = batch.tgt_ids[:, :-1]
    check_batch(cfg, vocab_size, batch.src_ids, dec_ids)
    enc = encode(P, cfg, batch.src_ids, batch.src_lengths, training, rng)
    return decode(P, cfg, enc, batch.src_lengths, dec_ids, training, rng)


def forward(ckpt: Checkpoint, batch, mode: str = "eval", rng=None) -> Tensor:
    P = Params.wrap(ckpt.params)
    with ad.no_grad():
        return forward_params(P, ckpt.config, ckpt.vocab.size, batch, mode, rng)


def labels_of(batch) -> np.ndarray:
    """Next-token targets y'[1:], PAD beyond each row's length."""
    return batch.tgt_ids[:, 1:]


__all__ = [
    "ModelConfig", "PRESETS", "Checkpoint", "AdamState", "CheckpointError", "ModelError",
    "init_model", "extend_embeddings", "forward", "forward_params", "encode", "decode",
    "param_shapes", "param_count", "Params", "labels_of", "PAD_ID",
]
