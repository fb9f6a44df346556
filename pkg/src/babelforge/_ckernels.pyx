# cython: language_level=3
"""Compiled versions of the text kernels in ``_pykernels``."""


def segment(str chunk, dict piece_ids, Py_ssize_t max_piece_len, long unk_id):
    cdef list out = []
    cdef Py_ssize_t i = 0
    cdef Py_ssize_t n = len(chunk)
    cdef Py_ssize_t length
    cdef object tid
    while i < n:
        length = max_piece_len if max_piece_len < n - i else n - i
        while length > 0:
            tid = piece_ids.get(chunk[i:i + length])
            if tid is not None:
                out.append(tid)
                i += length
                break
            length -= 1
        if length == 0:
            out.append(unk_id)
            i += 1
    return out


def count_pairs(list words, list freqs):
    cdef dict counts = {}
    cdef Py_ssize_t j, w, m
    cdef tuple word
    cdef long freq
    cdef object pair
    for w in range(len(words)):
        word = <tuple>words[w]
        freq = freqs[w]
        m = len(word)
        for j in range(m - 1):
            pair = (word[j], word[j + 1])
            counts[pair] = counts.get(pair, 0) + freq
    return counts


def ngram_counts(list tokens, Py_ssize_t n):
    cdef dict counts = {}
    cdef Py_ssize_t i
    cdef tuple gram
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i:i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def char_ngram_score(str text, list tables, list unseen):
    cdef double total = 0.0
    cdef Py_ssize_t k, i, n
    cdef Py_ssize_t m = len(text)
    cdef dict table
    cdef double miss
    for k in range(len(tables)):
        table = <dict>tables[k]
        n = k + 1
        miss = unseen[k]
        for i in range(m - n + 1):
            total += <double>table.get(text[i:i + n], miss)
    return total
