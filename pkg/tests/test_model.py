import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from babelforge import autodiff as ad
from babelforge.model import (Checkpoint, CheckpointError, ModelConfig, ModelError, Params,
                              extend_embeddings, forward, forward_params, init_model, labels_of,
                              param_count, param_shapes)
from babelforge.sampler import Batch, collate
from babelforge.vocab import PAD_ID, SPECIALS, Vocabulary, lang_surface
from conftest import make_batch


def vocab_of_size(n, langs=("ka", "en")):
    pieces = [f"p{i}" for i in range(n - len(SPECIALS) - len(langs))]
    toks = SPECIALS + tuple(pieces) + tuple(lang_surface(c) for c in langs)
    v = Vocabulary(toks, len(SPECIALS) + len(pieces))
    assert v.size == n and v.lang_codes == tuple(langs)
    return v


def toy_param_count_by_hand(V, d=128, f=512, L=2, T=256):
    ln = 2 * d
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    enc = L * (2 * ln + attn + ffn) + ln
    dec = L * (3 * ln + 2 * attn + ffn) + ln
    return V * d + 2 * T * d + enc + dec


def test_init_deterministic(mini_vocab, tiny_config):
    a = init_model(tiny_config, mini_vocab, np.random.default_rng(4))
    b = init_model(tiny_config, mini_vocab, np.random.default_rng(4))
    assert a.to_bytes() == b.to_bytes()
    c = init_model(tiny_config, mini_vocab, np.random.default_rng(5))
    assert not a.same_weights(c)


def test_toy_shapes_and_count():
    v = vocab_of_size(200)
    ck = init_model(ModelConfig.preset("toy"), v, np.random.default_rng(0))
    assert ck.params["embed_tokens"].shape == (200, 128)
    assert ck.num_params() == param_count(ck.config, 200) == toy_param_count_by_hand(200) == 1_017_344


def test_init_distributions():
    v = vocab_of_size(200)
    ck = init_model(ModelConfig.preset("toy"), v, np.random.default_rng(0))
    emb = ck.params["embed_tokens"]
    assert abs(emb.std() - 128 ** -0.5) < 0.003 and abs(emb.mean()) < 0.003
    w = ck.params["encoder.layers.0.ffn.fc1.weight"] if "encoder.layers.0.ffn.fc1.weight" in ck.params else None
    for name, arr in ck.params.items():
        if name.endswith(".bias"):
            assert not arr.any(), name
        elif name.endswith("ln.weight"):
            assert np.all(arr == 1), name
        elif arr.ndim == 2 and "embed" not in name:
            bound = math.sqrt(6 / sum(arr.shape))
            assert np.abs(arr).max() <= bound
            w = arr
    assert w is not None


def test_untied_layout():
    cfg = ModelConfig(layers=1, d_model=8, heads=2, ffn_dim=16, tie_embeddings=False, max_len=16)
    shapes = param_shapes(cfg, 30)
    assert "embed_tokens" not in shapes
    assert shapes["output_projection"] == shapes["encoder.embed_tokens"] == (30, 8)


def test_config_errors():
    with pytest.raises(ModelError, match="divisible"):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ModelError, match="preset"):
        ModelConfig.preset("huge")
    with pytest.raises(ModelError):
        ModelConfig(dropout=1.0)


def _pairs(bench, n=6, code="ka"):
    return bench.train[code].pairs[:n]


def test_logits_shape(mini_bench, mini_vocab, tiny_ckpt):
    batch = make_batch(mini_vocab, _pairs(mini_bench))
    logits = forward(tiny_ckpt, batch)
    # the decoder reads y'[:-1] and predicts y'[1:]
    assert logits.shape == (batch.rows, batch.tgt_ids.shape[1] - 1, mini_vocab.size)
    assert labels_of(batch).shape == logits.shape[:2]


def _repad(batch: Batch, extra: int, fill) -> Batch:
    def grow(ids, lengths):
        rows, T = ids.shape
        out = np.full((rows, T + extra), PAD_ID, dtype=ids.dtype)
        out[:, :T] = ids
        for r, n in enumerate(lengths):
            out[r, n:] = fill(r, T + extra - n)
        return out
    return Batch(batch.direction, grow(batch.src_ids, batch.src_lengths),
                 grow(batch.tgt_ids, batch.tgt_lengths), batch.src_lengths, batch.tgt_lengths)


def test_pad_columns_do_not_leak(mini_bench, mini_vocab, tiny_ckpt):
    batch = make_batch(mini_vocab, _pairs(mini_bench, 8))
    base = forward(tiny_ckpt, batch).data
    rng = np.random.default_rng(0)
    noisy = _repad(batch, 5, lambda r, k: rng.integers(5, mini_vocab.size, size=k))
    got = forward(tiny_ckpt, noisy).data
    for r, n in enumerate(batch.tgt_lengths):
        assert np.allclose(got[r, :n - 1], base[r, :n - 1], atol=1e-5)


def test_row_alone_equals_row_in_batch(mini_bench, mini_vocab, tiny_ckpt):
    pairs = _pairs(mini_bench, 5)
    batch = make_batch(mini_vocab, pairs)
    full = forward(tiny_ckpt, batch).data
    for r in range(batch.rows):
        src = list(batch.src_ids[r, :batch.src_lengths[r]])
        tgt = list(batch.tgt_ids[r, :batch.tgt_lengths[r]])
        one = forward(tiny_ckpt, collate(batch.direction, [(src, tgt)])).data
        n = batch.tgt_lengths[r] - 1
        assert np.allclose(one[0, :n], full[r, :n], atol=1e-5)


def test_eval_forward_bitwise_reproducible(mini_bench, mini_vocab, tiny_ckpt):
    batch = make_batch(mini_vocab, _pairs(mini_bench, 8))
    a = forward(tiny_ckpt, batch).data
    b = forward(tiny_ckpt.copy(), batch).data
    assert a.tobytes() == b.tobytes()


def test_train_mode_uses_dropout(mini_bench, mini_vocab):
    cfg = ModelConfig(layers=1, d_model=16, heads=2, ffn_dim=32, dropout=0.3, max_len=48)
    ck = init_model(cfg, mini_vocab, np.random.default_rng(0))
    batch = make_batch(mini_vocab, _pairs(mini_bench))
    P = Params.wrap(ck.params)
    with ad.no_grad():
        t1 = forward_params(P, cfg, mini_vocab.size, batch, "train", np.random.default_rng(1)).data
        t2 = forward_params(P, cfg, mini_vocab.size, batch, "train", np.random.default_rng(1)).data
    assert np.array_equal(t1, t2)
    assert not np.allclose(t1, forward(ck, batch).data)
    with pytest.raises(ModelError, match="mode"):
        forward(ck, batch, mode="test")


def test_over_length_and_bad_ids(mini_vocab, tiny_ckpt):
    long = collate(("ka", "en"), [([1] * 60, [1, 2])])
    with pytest.raises(ModelError, match="max_len"):
        forward(tiny_ckpt, long)
    bad = collate(("ka", "en"), [([mini_vocab.size + 3], [1, 2])])
    with pytest.raises(ModelError, match="outside"):
        forward(tiny_ckpt, bad)


def test_save_load_bitwise(tmp_path, tiny_ckpt):
    path = tmp_path / "m.ckpt"
    digest = tiny_ckpt.save(path)
    back = Checkpoint.load(path)
    assert back.to_bytes() == path.read_bytes()
    assert back.hash() == digest
    assert back.same_weights(tiny_ckpt) and back.provenance == tiny_ckpt.provenance
    for k, v in tiny_ckpt.params.items():
        assert back.params[k].dtype == v.dtype and back.params[k].tobytes() == v.tobytes()


def test_corrupt_checkpoints(tmp_path, tiny_ckpt):
    data = bytearray(tiny_ckpt.to_bytes())
    bad_magic = tmp_path / "a"
    bad_magic.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.load(bad_magic)
    data[-10] ^= 0xFF
    flipped = tmp_path / "b"
    flipped.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        Checkpoint.load(flipped)
    truncated = tmp_path / "c"
    truncated.write_bytes(tiny_ckpt.to_bytes()[:-100])
    with pytest.raises(CheckpointError):
        Checkpoint.load(truncated)
    with pytest.raises(CheckpointError, match="not found"):
        Checkpoint.load(tmp_path / "missing")


def test_shape_mismatch_rejected(tiny_ckpt):
    params = dict(tiny_ckpt.params)
    params["embed_tokens"] = params["embed_tokens"][:-1]
    with pytest.raises(CheckpointError, match="shape"):
        Checkpoint(tiny_ckpt.config, tiny_ckpt.vocab, params)


def test_extend_append_only():
    v = vocab_of_size(200)
    ck = init_model(ModelConfig.preset("toy"), v, np.random.default_rng(0))
    ext = extend_embeddings(ck, v.extend_languages(["xa", "xb", "xc"]), np.random.default_rng(1))
    assert ext.params["embed_tokens"].shape == (203, 128)
    assert ext.params["embed_tokens"][:200].tobytes() == ck.params["embed_tokens"].tobytes()
    new = ext.params["embed_tokens"][200:]
    assert 0.02 < new.std() < 0.2
    diff = {k for k in ck.params if ck.params[k].shape != ext.params[k].shape
            or ck.params[k].tobytes() != ext.params[k].tobytes()}
    assert diff == {"embed_tokens"}
    assert ext.provenance["parent"] == ck.hash()
    assert ext.provenance["added_languages"] == ["xa", "xb", "xc"]


def test_extend_by_nothing(tiny_ckpt):
    ext = extend_embeddings(tiny_ckpt, tiny_ckpt.vocab.extend_languages([]), np.random.default_rng(0))
    assert ext.params.keys() == tiny_ckpt.params.keys()
    assert all(np.array_equal(ext.params[k], tiny_ckpt.params[k]) for k in ext.params)
    assert ext.provenance["parent"] == tiny_ckpt.hash()


def test_extend_rejects_foreign_vocab(tiny_ckpt):
    with pytest.raises(ModelError, match="extension"):
        extend_embeddings(tiny_ckpt, vocab_of_size(300), np.random.default_rng(0))


def test_extended_logits_match_on_old_columns(mini_bench, mini_vocab, tiny_ckpt):
    batch = make_batch(mini_vocab, _pairs(mini_bench, 8))
    before = forward(tiny_ckpt, batch).data
    ext = extend_embeddings(tiny_ckpt, mini_vocab.extend_languages(["xa", "xb"]), np.random.default_rng(3))
    after = forward(ext, batch).data
    assert after.shape[-1] == mini_vocab.size + 2
    assert after[..., :mini_vocab.size].tobytes() == before.tobytes()


def test_tied_embedding_is_one_tensor(mini_bench, mini_vocab, tiny_ckpt):
    # a single stored matrix receives gradient from input lookups and the output projection
    from babelforge.train import sequence_loss
    assert [k for k in tiny_ckpt.params if "embed_tokens" in k] == ["embed_tokens"]
    batch = make_batch(mini_vocab, _pairs(mini_bench, 4))
    P = Params.wrap(tiny_ckpt.params, requires_grad=True)
    loss = sequence_loss(P, tiny_ckpt.config, mini_vocab.size, batch, 0.0)
    ad.backward(loss, list(P.values()))
    g = P["embed_tokens"].grad
    used = set(batch.src_ids.ravel()) | set(batch.tgt_ids.ravel())
    unused = [i for i in range(mini_vocab.size) if i not in used]
    # rows never looked up still get gradient through the output softmax
    assert np.abs(g[unused]).sum() > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(2, 9), st.integers(0, 2**31))
def test_random_batch_shapes(rows, src_len, tgt_len, seed):
    vocab = vocab_of_size(40)
    cfg = ModelConfig(layers=1, d_model=8, heads=2, ffn_dim=16, dropout=0.0, max_len=16)
    ck = init_model(cfg, vocab, np.random.default_rng(seed % 7))
    r = np.random.default_rng(seed)
    ex = [(list(r.integers(5, 40, size=r.integers(1, src_len + 1))),
           list(r.integers(5, 40, size=r.integers(2, tgt_len + 1)))) for _ in range(rows)]
    batch = collate(("ka", "en"), ex)
    out = forward(ck, batch).data
    assert out.shape == (rows, batch.tgt_ids.shape[1] - 1, 40)
    assert np.all(np.isfinite(out))
