"""Pure-Python reference versions of the text kernels.

These are the fallback when the compiled ``_ckernels`` module is unavailable,
and the oracle the compiled versions are tested against.
"""


def segment(chunk, piece_ids, max_piece_len, unk_id):
    """Greedy longest-match segmentation of ``chunk`` over ``piece_ids``."""
    out = []
    i = 0
    n = len(chunk)
    while i < n:
        for length in range(min(max_piece_len, n - i), 0, -1):
            tid = piece_ids.get(chunk[i:i + length])
            if tid is not None:
                out.append(tid)
                i += length
                break
        else:
            out.append(unk_id)
            i += 1
    return out


def count_pairs(words, freqs):
    """Frequency-weighted counts of adjacent symbol pairs."""
    counts = {}
    for word, freq in zip(words, freqs):
        for j in range(len(word) - 1):
            pair = (word[j], word[j + 1])
            counts[pair] = counts.get(pair, 0) + freq
    return counts


def ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i:i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def char_ngram_score(text, tables, unseen):
    """Sum of per-order character n-gram log-probabilities.

    ``tables[k]`` maps n-grams of order ``k + 1`` to log-probabilities and
    ``unseen[k]`` is the smoothed log-probability of an unseen n-gram.
    """
    total = 0.0
    for k, table in enumerate(tables):
        n = k + 1
        miss = unseen[k]
        for i in range(len(text) - n + 1):
            total += table.get(text[i:i + n], miss)
    return total
