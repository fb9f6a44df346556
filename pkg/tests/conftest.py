import numpy as np
import pytest

from babelforge import autodiff as ad
from babelforge.corpus import MonoCorpus
from babelforge.model import ModelConfig, init_model
from babelforge.sampler import augment_pair, collate
from babelforge.synth import build_benchmark, make_mltoy_config
from babelforge.vocab import build_vocab


def numeric_grad(f, x: np.ndarray, index, h=1e-5) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``x[index]`` (x mutated in place and restored)."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def rel_errors(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~((np.abs(a) < floor) & (np.abs(n) < floor))
    if not keep.any():
        return np.zeros(0)
    return np.abs(a[keep] - n[keep]) / np.maximum(np.abs(a[keep]), np.abs(n[keep]))


def gradcheck(build, inputs, h=1e-5, samples=None, rng=None) -> float:
    """Max relative error between backward() and central differences.

    ``build(*inputs)`` must return a scalar Tensor.  With ``samples`` set only
    that many random entries per input are probed.
    """
    for t in inputs:
        t.grad = None
    loss = build(*inputs)
    ad.backward(loss, inputs)
    analytic = [t.grad.copy() for t in inputs]

    def value():
        with ad.no_grad():
            return float(build(*inputs).data)

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, g in zip(inputs, analytic):
        flat = list(np.ndindex(t.shape))
        if samples is not None and len(flat) > samples:
            picks = rng.choice(len(flat), size=samples, replace=False)
            flat = [flat[i] for i in picks]
        num = np.array([numeric_grad(value, t.data, idx, h) for idx in flat])
        ana = np.array([g[idx] for idx in flat])
        err = rel_errors(ana, num)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


@pytest.fixture(scope="session")
def mini_bench():
    cfg = make_mltoy_config({"k": [("ka", 300), ("ke", 60)], "t": [("ta", 120)]},
                            lexicon_size=60, eval_size=20, seed=3, mono_docs=20, pivot_mono_docs=30)
    return build_benchmark(cfg)


@pytest.fixture(scope="session")
def mini_vocab(mini_bench):
    langs = ["en", "ka", "ke", "ta"]
    return build_vocab([mini_bench.mono[l] for l in langs], 160, langs)


@pytest.fixture(scope="session")
def word_vocab():
    mono = [MonoCorpus("aa", [["ab ab ba", "abba b"]]), MonoCorpus("bb", [["cab bac", "c a b"]])]
    return build_vocab(mono, 30, ["aa", "bb", "en"])


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(layers=1, d_model=16, heads=2, ffn_dim=32, dropout=0.0, max_len=48)


@pytest.fixture()
def tiny_ckpt(mini_vocab, tiny_config):
    return init_model(tiny_config, mini_vocab, np.random.default_rng(0))


def make_batch(vocab, pairs, src="ka", tgt="en"):
    ex = [augment_pair((vocab.encode(s), vocab.encode(t)), src, tgt, vocab) for s, t in pairs]
    return collate((src, tgt), ex)


def planted_fixture(n_clean=2000, n_dup=200, n_contam=50, n_leak=40, seed=7):
    """A ka->en bitext with known numbers of planted defects.

    Returns (bitext, eval_sets, mono corpora for LID, expected removals per stage).
    Duplicates copy clean pairs (every other one with extra whitespace),
    contaminated pairs carry a ka sentence on the en side, and leaked pairs
    reuse a test-set source (first half) or reference (second half).
    """
    from babelforge.corpus import Bitext
    from babelforge.synth import derive_rng, derive_translation, gen_base_sentence

    cfg = make_mltoy_config({"k": [("ka", 10)]}, lexicon_size=200, eval_size=50, seed=seed,
                            mono_docs=40, pivot_mono_docs=40)
    bench = build_benchmark(cfg)
    lex, ka = cfg.lexicon, cfg.spec("ka")
    test = bench.test["ka"]
    rng = derive_rng(seed, "planted")
    seen = set(test.references) | set(bench.valid["ka"].references)
    base = []
    while len(base) < n_clean + 2 * n_contam + n_leak:
        s = gen_base_sentence(lex, rng)
        if s not in seen:
            seen.add(s)
            base.append(s)
    clean = [(derive_translation(ka, s), s) for s in base[:n_clean]]
    extra = iter(base[n_clean:])
    contam = [(derive_translation(ka, next(extra)), derive_translation(ka, next(extra)))
              for _ in range(n_contam)]
    leak = []
    for i in range(n_leak):
        if i < n_leak // 2:
            leak.append((test.sources[i], next(extra)))
        else:
            leak.append((derive_translation(ka, next(extra)), test.references[i]))
    dups = []
    for j, i in enumerate(rng.choice(n_clean, size=n_dup, replace=True)):
        s, t = clean[int(i)]
        dups.append((s, "  " + t.replace(" ", "   ") + " ") if j % 2 else (s, t))
    pairs = clean + contam + leak + dups
    pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    expected = {"dedup": n_dup, "lid": n_contam, "leakage": n_leak}
    return Bitext("ka", "en", pairs), [bench.valid["ka"], test], [bench.mono["ka"], bench.mono["en"]], expected


# -- acceptance verdicts ------------------------------------------------------------------

ACCEPTANCE = []


def verdict(criterion: str, ok: bool, detail: str) -> bool:
    """Record one PASS/FAIL line; they are printed together at the end of the run."""
    line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
    ACCEPTANCE.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
