import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from babelforge.corpus import read_pairs
from babelforge.inference import corpus_bleu
from babelforge.synth import (DOC_SENTENCES, SynthError, SynthLangSpec, build_benchmark,
                              build_lexicon, derive_rng, derive_translation, gen_base_sentence,
                              gen_benchmark, identity_spec, invert_translation, load_specs,
                              make_family, make_mltoy_config, mapping_agreement, read_manifest)


@pytest.fixture(scope="module")
def lex():
    return build_lexicon(500, 1)


def test_fixed_seed_fixed_sentence(lex):
    assert gen_base_sentence(lex, derive_rng(5, "x")) == gen_base_sentence(lex, derive_rng(5, "x"))


def test_lengths_and_diversity(lex):
    rng = derive_rng(1, "sweep")
    sents = [gen_base_sentence(lex, rng) for _ in range(10_000)]
    lengths = [len(s.split()) for s in sents]
    assert min(lengths) >= 3 and max(lengths) <= 12
    assert len(set(sents)) / len(sents) >= 0.95


def test_identity_and_known_permutation(lex):
    s = gen_base_sentence(lex, derive_rng(2, "a"))
    assert derive_translation(identity_spec(lex), s) == s
    base = ("cat", "sat", "mat")
    spec = SynthLangSpec("xx", "f", (1, 0, 2), "identity", 0, base, ("zat", "gat", "nat"))
    assert derive_translation(spec, "cat sat") == "gat zat"
    with pytest.raises(SynthError, match="not in the base lexicon"):
        derive_translation(spec, "dog")


def test_spec_validation():
    with pytest.raises(SynthError, match="bijection"):
        SynthLangSpec("xx", "f", (0, 0), "identity", 0, ("a", "b"), ("c", "d"))
    with pytest.raises(SynthError, match="reorder"):
        SynthLangSpec("xx", "f", (0, 1), "shuffle", 0, ("a", "b"), ("c", "d"))


def test_invert_round_trip_10k(lex):
    fam = make_family("k", ["ka", "ke"], lex, seed=1) + make_family("t", ["ta"], lex, seed=1, family_index=1)
    rng = derive_rng(1, "rt")
    for _ in range(10_000):
        s = gen_base_sentence(lex, rng)
        for spec in fam:
            assert invert_translation(spec, derive_translation(spec, s)) == s


def test_family_agreement(lex):
    a, b, c = make_family("k", ["ka", "ke", "ki"], lex, seed=4, agreement=0.7)
    for x, y in ((a, b), (a, c), (b, c)):
        assert mapping_agreement(x, y) >= 0.7
        assert x.reorder_rule == y.reorder_rule
    with pytest.raises(SynthError):
        make_family("k", ["ka"], lex, seed=4, agreement=0.3)


def test_families_use_different_scripts(lex):
    (ka,) = make_family("k", ["ka"], lex, seed=1)
    (ta,) = make_family("t", ["ta"], lex, seed=1, family_index=1, suffix_offset=1)
    assert not set("".join(ka.surface_lexicon)) & set("".join(ta.surface_lexicon))


def small_config(seed=1):
    return make_mltoy_config({"k": [("ka", 500), ("ke", 50)], "t": [("ta", 200), ("te", 5)]},
                             lexicon_size=80, eval_size=30, seed=seed, mono_docs=12)


def test_gen_benchmark_counts_and_determinism(tmp_path):
    cfg = small_config()
    a = gen_benchmark(cfg, tmp_path / "a")
    gen_benchmark(cfg, tmp_path / "b")
    for code, n in cfg.bucket_sizes.items():
        assert len(read_pairs(tmp_path / "a" / f"train.{code}-en.tsv")) == n
        assert len(read_pairs(tmp_path / "a" / f"test.{code}-en.tsv")) == 30
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_manifest(tmp_path / "a")
    assert {r["language"] for r in rows} == {"en", "ka", "ke", "ta", "te"}
    assert load_specs(tmp_path / "a")["ka"] == cfg.spec("ka")
    for corpus in a.mono.values():
        assert all(DOC_SENTENCES[0] <= len(d) <= DOC_SENTENCES[1] for d in corpus.documents)


def test_train_eval_disjoint():
    bench = build_benchmark(small_config(2))
    for code in bench.train:
        held = set(bench.test[code].references) | set(bench.valid[code].references)
        assert not held & {t for _, t in bench.train[code].pairs}
        assert not set(bench.test[code].references) & set(bench.valid[code].references)


def test_oracle_translator_scores_100():
    cfg = small_config(3)
    bench = build_benchmark(cfg)
    for code, es in bench.test.items():
        spec = cfg.spec(code)
        hyps = [invert_translation(spec, s) for s in es.sources]
        assert corpus_bleu(hyps, es.references) == 100.0


def test_oversized_bucket_rejected():
    cfg = make_mltoy_config({"k": [("ka", 10_000_000)]}, lexicon_size=20, eval_size=5)
    with pytest.raises(SynthError, match="distinct"):
        build_benchmark(cfg)


def test_config_errors(lex):
    (ka,) = make_family("k", ["ka"], lex, seed=1)
    from babelforge.synth import MLToyConfig
    with pytest.raises(SynthError, match="bucket"):
        MLToyConfig(500, [ka], {}, 10, 1)
    with pytest.raises(SynthError, match="distinct"):
        MLToyConfig(500, [ka, ka], {"ka": 1}, 10, 1)


def test_rng_streams_independent_of_order():
    a = derive_rng(1, "mono", "ka").random(4)
    derive_rng(1, "mono", "ke").random(100)
    assert np.array_equal(a, derive_rng(1, "mono", "ka").random(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 1.0))
def test_family_similarity_property(seed, agreement):
    lex = build_lexicon(60, seed % 1000)
    specs = make_family("k", ["a1", "a2", "a3"], lex, seed=seed, agreement=agreement)
    for i in range(3):
        for j in range(i + 1, 3):
            assert mapping_agreement(specs[i], specs[j]) >= 0.5
