import pytest
from hypothesis import given, settings, strategies as st

from babelforge.corpus import MonoCorpus
from babelforge.vocab import (EOS_ID, SPECIALS, UNK_ID, Vocabulary, VocabError, build_vocab,
                              decode_text, encode, extend_languages, lang_surface)


def test_tiny_corpus_inventory():
    v = build_vocab([MonoCorpus("aa", [["ab ab"]])], 16, ["aa", "bb"])
    assert v.tokens[:5] == SPECIALS
    assert v.lang_codes == ("aa", "bb")
    assert v.tokens[-2:] == ("[aa]", "[bb]")
    assert {"a", "b", "▁"} <= set(v.pieces)
    assert any(p.startswith("▁") and len(p) > 1 for p in v.pieces)
    assert v.size <= 16


def test_build_is_byte_identical(mini_bench):
    mono = [mini_bench.mono["en"], mini_bench.mono["ka"]]
    a = build_vocab(mono, 120, ["en", "ka"])
    b = build_vocab(mono, 120, ["en", "ka"])
    assert a.to_text() == b.to_text()


def test_capacity_and_empty_errors():
    mono = [MonoCorpus("aa", [["abcdefgh"]])]
    with pytest.raises(VocabError, match="target_size"):
        build_vocab(mono, 8, ["aa"])
    with pytest.raises(VocabError):
        build_vocab([], 100, ["aa"])


def test_round_trip_over_training_corpus(mini_bench, mini_vocab):
    n = 0
    for lang in ("en", "ka", "ke", "ta"):
        for s in mini_bench.mono[lang].sentences:
            ids = mini_vocab.encode(s)
            assert UNK_ID not in ids
            assert mini_vocab.decode(ids) == s
            n += 1
    assert n > 100


def test_heldout_round_trip(mini_bench, mini_vocab):
    for s in mini_bench.test["ka"].sources[:20]:
        assert decode_text(mini_vocab, encode(mini_vocab, s)) == s


def test_encode_edge_cases(word_vocab):
    assert word_vocab.encode("") == []
    # a word on its own is looked up in its word-initial (marked) form
    assert word_vocab.encode("ab") == [word_vocab.piece_id("▁ab")]
    assert word_vocab.encode("abba ab") == [word_vocab.piece_id("▁abba"), word_vocab.piece_id("▁ab")]
    assert UNK_ID in word_vocab.encode("zzz")


def test_decode_drops_specials_and_lang_tokens(word_vocab):
    ids = [word_vocab.lang_id("en"), *word_vocab.encode("ab"), EOS_ID]
    assert word_vocab.decode(ids) == "ab"
    assert word_vocab.decode([]) == ""
    with pytest.raises(VocabError, match="out of range"):
        word_vocab.decode([word_vocab.size])


def test_extend_empty_bumps_version(word_vocab):
    ext = extend_languages(word_vocab, [])
    assert ext.tokens == word_vocab.tokens
    assert ext.version == word_vocab.version + 1


def test_extend_appends_and_keeps_ids(mini_bench, mini_vocab):
    ext = mini_vocab.extend_languages(["te", "ti", "ki"])
    assert ext.size == mini_vocab.size + 3
    assert ext.tokens[:mini_vocab.size] == mini_vocab.tokens
    assert [ext.lang_id(c) for c in ("te", "ti", "ki")] == list(range(mini_vocab.size, mini_vocab.size + 3))
    for s in list(mini_bench.mono["ka"].sentences)[:50]:
        assert ext.encode(s) == mini_vocab.encode(s)
    assert ext.is_extension_of(mini_vocab)
    assert not mini_vocab.is_extension_of(ext) or ext.size == mini_vocab.size


def test_extend_25_to_50_keeps_language_ids():
    codes = [f"l{i:02d}" for i in range(25)]
    v = build_vocab([MonoCorpus("l00", [["abc cab"]])], 60, codes)
    ext = v.extend_languages([f"m{i:02d}" for i in range(25)])
    assert len(ext.lang_codes) == 50
    assert all(ext.lang_id(c) == v.lang_id(c) for c in codes)


def test_extend_errors(word_vocab):
    with pytest.raises(VocabError, match="already"):
        word_vocab.extend_languages(["aa"])
    with pytest.raises(VocabError, match="duplicate"):
        word_vocab.extend_languages(["cc", "cc"])


def test_file_round_trip(tmp_path, mini_vocab):
    p = tmp_path / "vocab.txt"
    mini_vocab.save(p)
    text = p.read_text(encoding="utf-8")
    assert text.startswith(f"BABELVOCAB v1 size={mini_vocab.size} langblock={mini_vocab.lang_block_start}\n")
    back = Vocabulary.load(p)
    assert back == mini_vocab
    back.save(tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == p.read_bytes()


def test_bad_files():
    with pytest.raises(VocabError):
        Vocabulary.from_text("")
    with pytest.raises(VocabError, match="header"):
        Vocabulary.from_text("NOTVOCAB v1 size=0 langblock=5\n")
    with pytest.raises(VocabError, match="tokens"):
        Vocabulary.from_text("BABELVOCAB v1 size=9 langblock=5\n" + "\n".join(SPECIALS) + "\n")


def test_type_invariants(mini_vocab):
    ids = mini_vocab.special_ids
    assert len(set(ids.values())) == 5
    surfaces = {lang_surface(c) for c in mini_vocab.lang_codes}
    assert not surfaces & set(mini_vocab.pieces)
    assert all(mini_vocab.is_lang_token(mini_vocab.lang_id(c)) for c in mini_vocab.lang_codes)


@settings(max_examples=150, deadline=None)
@given(st.text(alphabet="abkmnoprstuz ", max_size=60))
def test_encode_deterministic_total_and_round_trips(mini_vocab, text):
    ids = mini_vocab.encode(text)
    assert ids == mini_vocab.encode(text)
    assert all(0 <= i < mini_vocab.size for i in ids)
    if UNK_ID not in ids:
        assert mini_vocab.decode(ids) == text


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["xa", "xb", "xc", "yy", "zz", "qq"]), unique=True, max_size=5))
def test_extension_never_moves_ids(mini_vocab, codes):
    ext = mini_vocab.extend_languages(codes)
    assert {t: i for i, t in enumerate(mini_vocab.tokens)}.items() <= {t: i for i, t in enumerate(ext.tokens)}.items()
