"""Canonical digests used across the build system.

Every hash that feeds a cache key or a reproducibility check goes through
this module so the canonical forms stay in one place:

* file digest     — SHA-256 of the raw bytes.
* tree digest     — SHA-256 over sorted ``<posix-path>\\0<file-digest>`` lines
                    joined with ``\\n``, paths compared as UTF-8 bytes.
* canonical JSON  — sorted keys, compact separators, UTF-8.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Any, Iterable

HEX64_RE = re.compile(r"[0-9a-f]{64}")

# Plain name usable in file paths and task ids.
TOKEN_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]*")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_hex(text.encode("utf-8"))


def is_hex64(value: str) -> bool:
    return bool(HEX64_RE.fullmatch(value))


def is_token(value: str) -> bool:
    return bool(TOKEN_RE.fullmatch(value))


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root: Path) -> str:
    """Digest of a directory tree: sorted (relative path, content hash) pairs.

    Only regular files participate; empty directories are invisible.  Paths
    are posix-style and sorted by their UTF-8 byte encoding so the result is
    identical across machines and filesystem orders.
    """
    pairs = []
    for path in root.rglob("*"):
        if path.is_file():
            rel = path.relative_to(root).as_posix()
            pairs.append((rel.encode("utf-8"), file_digest(path)))
    pairs.sort()
    lines = [raw.decode("utf-8") + "\0" + digest for raw, digest in pairs]
    return sha256_text("\n".join(lines))


def pairs_digest(pairs: Iterable[tuple[str, ...]]) -> str:
    """Digest of pre-sorted string tuples, one ``\\0``-joined tuple per line."""
    return sha256_text("\n".join("\0".join(p) for p in pairs))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_json_digest(obj: Any) -> str:
    return sha256_text(canonical_json(obj))
