"""Run manifests, file checksums and the worker-thread cap."""
from __future__ import annotations

import datetime
import hashlib
import json
import os
from pathlib import Path

THREADS_ENV = "BABELFORGE_THREADS"
# keys that may differ between otherwise identical runs
VOLATILE_KEYS = ("created",)

_limiter = None


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def apply_thread_cap() -> int:
    """Cap BLAS threads at ``thread_count()`` for the life of the process."""
    global _limiter
    n = thread_count()
    from threadpoolctl import threadpool_limits
    _limiter = threadpool_limits(limits=n)
    return n


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def checksums(directory, exclude=("manifest.json",)) -> dict[str, str]:
    """sha256 of every regular file under ``directory`` (relative names)."""
    directory = Path(directory)
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and not any(p.name.endswith(e) for e in exclude):
            out[str(p.relative_to(directory))] = sha256_file(p)
    return out


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(path, data: dict) -> None:
    body = dict(data)
    body["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    Path(path).write_text(json.dumps(body, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def stable_view(manifest: dict) -> dict:
    return {k: v for k, v in manifest.items() if k not in VOLATILE_KEYS}
