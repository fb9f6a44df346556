"""Selects the compiled text kernels when built, else the pure-Python ones.

Set ``BABELFORGE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("BABELFORGE_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

segment = _impl.segment
count_pairs = _impl.count_pairs
ngram_counts = _impl.ngram_counts
char_ngram_score = _impl.char_ngram_score

__all__ = ["BACKEND", "segment", "count_pairs", "ngram_counts", "char_ngram_score"]
