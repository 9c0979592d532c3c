"""Independent reference implementations used to cross-check the package.

Everything here is written from the documented canonical forms using raw
hashlib/os primitives and deliberately shares no code with kilnci, so a bug
in the package cannot hide in the oracle.
"""

import hashlib
import os


def sha_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha_text(text: str) -> str:
    return sha_bytes(text.encode("utf-8"))


def oracle_tree_digest(root) -> str:
    """Sorted (posix relpath, file sha256) pairs, path\\0hash lines, \\n-joined."""
    pairs = []
    for dirpath, _dirnames, filenames in os.walk(root):
        for filename in filenames:
            full = os.path.join(dirpath, filename)
            if not os.path.isfile(full):
                continue
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            with open(full, "rb") as fh:
                pairs.append((rel.encode("utf-8"), sha_bytes(fh.read())))
    pairs.sort()
    body = "\n".join(raw.decode("utf-8") + "\0" + digest for raw, digest in pairs)
    return sha_text(body)


def oracle_workspace_fingerprint(triples) -> str:
    """triples: iterable of (project name, revision, content digest)."""
    lines = ["\0".join(t) for t in sorted(triples)]
    return sha_text("\n".join(lines))


def oracle_task_hash(task_id, recipe_text_digest, source_digest, dep_unihashes) -> str:
    text = f"{task_id}\n{recipe_text_digest}\n{source_digest or '-'}\n"
    for unihash in dep_unihashes:
        text += unihash + "\n"
    return sha_text(text)


def oracle_run_task_blob(task_id, semantic_digest, source_digest, dep_outhashes) -> bytes:
    text = f"{task_id}\n{semantic_digest}\n{source_digest or '-'}\n"
    for outhash in dep_outhashes:
        text += outhash + "\n"
    return text.encode("utf-8")


def oracle_recipe_semantic_digest(name, version, depends, rdepends, src,
                                  kernel_module, autoload) -> str:
    import json
    obj = {
        "name": name,
        "version": version,
        "depends": sorted(depends),
        "rdepends": sorted(rdepends),
        "src": src,
        "kernel_module": kernel_module,
        "autoload": autoload,
    }
    return sha_text(json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False))


class HashservModel:
    """Brute-force model of the equivalence store protocol."""

    def __init__(self):
        self.by_taskhash = {}
        self.by_outhash = {}

    def report(self, method, taskhash, outhash):
        key = (method, outhash)
        if key in self.by_outhash:
            unihash = self.by_outhash[key]
        else:
            unihash = taskhash
            self.by_outhash[key] = unihash
        self.by_taskhash[(method, taskhash)] = unihash
        return unihash

    def query(self, method, taskhash):
        return self.by_taskhash.get((method, taskhash))
