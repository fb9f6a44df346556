import importlib
import os
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from babelforge import _pykernels as py
from babelforge import kernels

try:
    from babelforge import _ckernels as cy
except ImportError:     # extension not built: only the fallback is exercised
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled kernels not built")

alphabet = st.sampled_from(list("abcdeħ▁ж "))
texts = st.text(alphabet, min_size=0, max_size=30)


@needs_ext
@settings(max_examples=300, deadline=None)
@given(texts, st.lists(st.text(alphabet, min_size=1, max_size=4), min_size=0, max_size=15))
def test_segment_matches(chunk, pieces):
    ids = {p: i + 10 for i, p in enumerate(dict.fromkeys(pieces))}
    longest = max((len(p) for p in ids), default=1)
    assert cy.segment(chunk, ids, longest, 3) == py.segment(chunk, ids, longest, 3)


@needs_ext
@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from("abcd"), max_size=6).map(tuple), st.integers(1, 50)),
                max_size=12))
def test_count_pairs_matches(items):
    words = [w for w, _ in items]
    freqs = [f for _, f in items]
    assert cy.count_pairs(words, freqs) == py.count_pairs(words, freqs)


@needs_ext
@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "dd"]), max_size=20), st.integers(1, 5))
def test_ngram_counts_match(tokens, n):
    assert cy.ngram_counts(tokens, n) == py.ngram_counts(tokens, n)


@needs_ext
@settings(max_examples=300, deadline=None)
@given(texts, st.dictionaries(st.text(alphabet, min_size=1, max_size=1), st.floats(-20, 0), max_size=6),
       st.dictionaries(st.text(alphabet, min_size=2, max_size=2), st.floats(-20, 0), max_size=6))
def test_char_ngram_score_bitwise(text, uni, bi):
    tables, unseen = [uni, bi], [-9.5, -12.25]
    assert cy.char_ngram_score(text, tables, unseen) == py.char_ngram_score(text, tables, unseen)


def test_examples():
    assert py.segment("abab", {"ab": 7, "a": 5, "b": 6}, 2, 3) == [7, 7]
    assert py.segment("abx", {"ab": 7}, 2, 3) == [7, 3]
    assert py.count_pairs([("a", "b", "a", "b")], [2]) == {("a", "b"): 4, ("b", "a"): 2}
    assert py.ngram_counts(["a", "b", "a"], 2) == {("a", "b"): 1, ("b", "a"): 1}
    assert py.ngram_counts(["a"], 2) == {}
    assert py.char_ngram_score("ab", [{"a": -1.0}], [-5.0]) == -6.0


def test_backend_switch():
    env = dict(os.environ, BABELFORGE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from babelforge import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "python"
    if cy is not None and not os.environ.get("BABELFORGE_PURE_PYTHON"):
        assert importlib.reload(kernels).BACKEND == "cython"


def test_pipeline_same_under_both_backends(tmp_path):
    """Vocabulary and LID built with either backend are identical."""
    script = (
        "from babelforge.synth import make_mltoy_config, build_benchmark\n"
        "from babelforge.vocab import build_vocab\n"
        "from babelforge.corpus import train_lid\n"
        "from babelforge.inference import corpus_bleu\n"
        "c = make_mltoy_config({'k': [('ka', 50)], 't': [('ta', 50)]}, lexicon_size=40, eval_size=10,"
        " seed=2, mono_docs=10)\n"
        "b = build_benchmark(c)\n"
        "m = [b.mono[l] for l in ('en', 'ka', 'ta')]\n"
        "v = build_vocab(m, 150, ['en', 'ka', 'ta'])\n"
        "lid = train_lid(m)\n"
        "print(v.to_text())\n"
        "print([lid.classify(s) for s, _ in b.train['ka'].pairs[:20]])\n"
        "print(repr(lid.score(b.train['ta'].pairs[0][0])))\n"
        "print(corpus_bleu([t for _, t in b.train['ka'].pairs], [t for _, t in b.train['ta'].pairs]))\n"
    )
    outs = []
    for pure in ("1", ""):
        env = dict(os.environ, BABELFORGE_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, env=env)
        assert res.returncode == 0, res.stderr
        outs.append(res.stdout)
    assert outs[0] == outs[1]
