"""Task execution with local stamps, remote caches, and sstate accounting.

Execution walks the task graph level by level.  For each task the executor
derives the input hash from the dependencies' unihashes, asks the hash
equivalence service for a canonical identity, and then picks the cheapest
disposition: ``current`` (local stamp still valid), ``restored`` (fetched
from the sstate cache), or ``executed``.  Unreachable caches degrade the
build to local-only behavior instead of failing it.

Accounting mirrors a shared-state build system's summary: ``wanted`` counts
cache lookups (cacheable tasks that were not already current), split into
``found`` and ``missed``; ``current`` counts tasks skipped via local stamps.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .cache import CacheClient, CacheEndpoints
from .errors import BuildFailure, CacheError, CacheUnavailableError, KilnError, TaskExecutionError
from .hashing import canonical_json, canonical_json_digest, sha256_hex
from .taskgraph import Task, TaskGraph, task_hash, topological_schedule

logger = logging.getLogger(__name__)

# Method token under which this executor reports task signatures.
SIG_METHOD = "kiln-v1"

DISPOSITIONS = ("current", "restored", "executed")


@dataclass(frozen=True)
class TaskOutput:
    blob: bytes
    outhash: str
    cost_spent: int

    @classmethod
    def from_blob(cls, blob: bytes, cost_spent: int) -> "TaskOutput":
        return cls(blob=blob, outhash=sha256_hex(blob), cost_spent=cost_spent)


class LocalState:
    """Completed-task stamps plus the matching output blobs on disk.

    Invariant: a stamp exists iff the task's blob file is present, so a
    stamp hit can always be served locally.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.outputs = self.root / "outputs"
        self.outputs.mkdir(parents=True, exist_ok=True)
        self._stamps_path = self.root / "stamps.json"
        self._lock = threading.Lock()
        self._stamps: dict[str, str] = {}
        if self._stamps_path.is_file():
            self._stamps = json.loads(self._stamps_path.read_text(encoding="utf-8"))

    def stamp(self, task_id: str) -> str | None:
        with self._lock:
            unihash = self._stamps.get(task_id)
        if unihash is not None and not self._blob_path(task_id).is_file():
            return None
        return unihash

    def _blob_path(self, task_id: str) -> Path:
        return self.outputs / task_id

    def has_blob(self, task_id: str) -> bool:
        return self._blob_path(task_id).is_file()

    def read_blob(self, task_id: str) -> bytes:
        path = self._blob_path(task_id)
        if not path.is_file():
            raise KilnError(f"missing local output for task {task_id}")
        return path.read_bytes()

    def record(self, task_id: str, unihash: str, blob: bytes) -> None:
        with self._lock:
            self._blob_path(task_id).write_bytes(blob)
            self._stamps[task_id] = unihash
            tmp = self._stamps_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(self._stamps, indent=2, sort_keys=True), encoding="utf-8")
            tmp.replace(self._stamps_path)

    def stamps(self) -> dict[str, str]:
        with self._lock:
            return dict(self._stamps)

    def outhashes(self) -> dict[str, str]:
        """sha256 of every stored blob, keyed by task id."""
        return {tid: sha256_hex(self.read_blob(tid)) for tid in sorted(self.stamps())}


@dataclass
class BuildReport:
    wanted: int = 0
    found: int = 0
    missed: int = 0
    current: int = 0
    attempted: int = 0
    not_rerun: int = 0
    executed_cost: int = 0
    total_cost: int = 0
    per_task: tuple[tuple[str, str, int], ...] = ()
    failed_tasks: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def validate(self) -> None:
        """Accounting identities; hold for every report a build produces."""
        if self.wanted != self.found + self.missed:
            raise KilnError(f"report identity broken: wanted {self.wanted} != found+missed")
        if self.not_rerun != self.found + self.current:
            raise KilnError(f"report identity broken: not_rerun {self.not_rerun} != found+current")
        if self.attempted != len(self.per_task):
            raise KilnError("report identity broken: attempted != per-task rows")
        executed = sum(cost for _, disposition, cost in self.per_task if disposition == "executed")
        if self.executed_cost != executed:
            raise KilnError("report identity broken: executed_cost mismatch")

    def to_json_obj(self) -> dict:
        return {
            "wanted": self.wanted, "found": self.found, "missed": self.missed,
            "current": self.current, "attempted": self.attempted,
            "not_rerun": self.not_rerun, "executed_cost": self.executed_cost,
            "total_cost": self.total_cost,
            "per_task": [list(row) for row in self.per_task],
            "failed_tasks": list(self.failed_tasks),
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_json_obj())

    @classmethod
    def from_json_obj(cls, obj: dict) -> "BuildReport":
        return cls(
            wanted=obj["wanted"], found=obj["found"], missed=obj["missed"],
            current=obj["current"], attempted=obj["attempted"],
            not_rerun=obj["not_rerun"], executed_cost=obj["executed_cost"],
            total_cost=obj["total_cost"],
            per_task=tuple((tid, d, c) for tid, d, c in obj["per_task"]),
            failed_tasks=tuple(obj.get("failed_tasks", ())),
            warnings=tuple(obj.get("warnings", ())),
        )


@dataclass(frozen=True)
class ImageArtifact:
    image_name: str
    packages: tuple[tuple[str, str, str], ...]  # (name, version, package outhash)
    autoload_modules: tuple[str, ...]
    rdepends: tuple[tuple[str, tuple[str, ...]], ...]
    image_digest: str

    @staticmethod
    def _digest_fields(image_name, packages, autoload_modules, rdepends) -> str:
        return canonical_json_digest({
            "image_name": image_name,
            "packages": [list(p) for p in packages],
            "autoload_modules": list(autoload_modules),
            "rdepends": {name: list(deps) for name, deps in rdepends},
        })

    @classmethod
    def compose(cls, image_name, packages, autoload_modules, rdepends) -> "ImageArtifact":
        packages = tuple(sorted(tuple(p) for p in packages))
        autoload_modules = tuple(sorted(autoload_modules))
        rdepends = tuple(sorted((name, tuple(deps)) for name, deps in rdepends))
        return cls(
            image_name=image_name,
            packages=packages,
            autoload_modules=autoload_modules,
            rdepends=rdepends,
            image_digest=cls._digest_fields(image_name, packages, autoload_modules, rdepends),
        )

    def validate(self) -> None:
        recomputed = self._digest_fields(
            self.image_name, self.packages, self.autoload_modules, self.rdepends
        )
        if recomputed != self.image_digest:
            raise KilnError("image digest does not match its fields")

    def package_names(self) -> set[str]:
        return {name for name, _, _ in self.packages}

    def rdepends_map(self) -> dict[str, tuple[str, ...]]:
        return dict(self.rdepends)

    def without_package(self, name: str) -> "ImageArtifact":
        """Artifact with one package deleted (digest recomputed)."""
        return ImageArtifact.compose(
            self.image_name,
            [p for p in self.packages if p[0] != name],
            [m for m in self.autoload_modules if m != name],
            [(n, deps) for n, deps in self.rdepends if n != name],
        )

    def to_json_obj(self) -> dict:
        return {
            "image_name": self.image_name,
            "packages": [list(p) for p in self.packages],
            "autoload_modules": list(self.autoload_modules),
            "rdepends": {name: list(deps) for name, deps in self.rdepends},
            "image_digest": self.image_digest,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_json_obj())

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ImageArtifact":
        artifact = cls(
            image_name=obj["image_name"],
            packages=tuple(tuple(p) for p in obj["packages"]),
            autoload_modules=tuple(obj["autoload_modules"]),
            rdepends=tuple(sorted((n, tuple(d)) for n, d in obj["rdepends"].items())),
            image_digest=obj["image_digest"],
        )
        artifact.validate()
        return artifact


def run_task(t: Task, dep_outputs: Mapping[str, TaskOutput]) -> TaskOutput:
    """Deterministic task body.

    The produced blob is a canonical record of the task id, the
    build-relevant input digests, and the dependencies' outhashes in
    dependency task-id order.  Comment-only or cost-only recipe edits do not
    change it, which is what gives the hash equivalence service real work.
    """
    if t.task_name == "compile" and t.compile_fail:
        raise TaskExecutionError(t.task_id, "COMPILE_FAIL sentinel present in source tree")
    text = f"{t.task_id}\n{t.semantic_digest}\n{t.source_digest or '-'}\n"
    text += "".join(dep_outputs[dep].outhash + "\n" for dep in sorted(dep_outputs))
    return TaskOutput.from_blob(text.encode("utf-8"), cost_spent=t.cost)


@dataclass
class _TaskResult:
    task_id: str
    disposition: str
    unihash: str
    outhash: str
    blob: bytes
    cost: int
    counts_lookup: bool  # participates in wanted/found/missed accounting
    error: TaskExecutionError | None = None


class _CacheSession:
    """Per-build cache handle that degrades to no-cache on the first failure."""

    def __init__(self, endpoints: CacheEndpoints | None):
        self.client = CacheClient(endpoints) if endpoints is not None else None
        self._ok = endpoints is not None
        self._lock = threading.Lock()
        self.warnings: list[str] = []

    @property
    def active(self) -> bool:
        with self._lock:
            return self._ok

    def degrade(self, exc: CacheUnavailableError) -> None:
        with self._lock:
            if self._ok:
                self._ok = False
                self.warnings.append(f"cache unavailable, continuing without it: {exc}")
                logger.warning("cache unavailable, continuing without it: %s", exc)

    def close(self) -> None:
        if self.client is not None:
            self.client.close()


def execute_build(
    g: TaskGraph,
    cache: CacheEndpoints | None,
    local: LocalState,
    jobs: int = 1,
) -> tuple[BuildReport, ImageArtifact | None]:
    """Run every task in the graph; returns the report and, for image
    graphs, the composed artifact.

    Tasks inside one schedule level may run concurrently (``jobs`` workers);
    results merge in task-id order so reports and hashes are identical for
    any worker count.  A failing task aborts the build by raising
    :class:`BuildFailure` carrying the partial report.
    """
    if jobs < 1:
        raise KilnError("jobs must be >= 1")
    levels = topological_schedule(g)
    session = _CacheSession(cache)
    unihashes: dict[str, str] = {}
    outhashes: dict[str, str] = {}
    blobs: dict[str, bytes] = {}
    report = BuildReport(total_cost=g.total_cost())
    per_task: list[tuple[str, str, int]] = []

    def process(tid: str) -> _TaskResult:
        t = g.tasks[tid]
        deps = sorted(g.dependencies(tid))
        taskhash = task_hash(t, [unihashes[d] for d in deps])
        unihash = None
        if session.active:
            try:
                unihash = session.client.hashserv_query(SIG_METHOD, taskhash)
            except CacheUnavailableError as exc:
                session.degrade(exc)
        if unihash is None:
            unihash = taskhash

        if t.cacheable:
            if local.stamp(tid) == unihash:
                blob = local.read_blob(tid)
                return _TaskResult(tid, "current", unihash, sha256_hex(blob), blob,
                                   t.cost, counts_lookup=False)
            if session.active:
                data = None
                try:
                    data = session.client.sstate_get(f"ss/{tid}/{unihash}")
                except CacheUnavailableError as exc:
                    session.degrade(exc)
                if data is not None:
                    local.record(tid, unihash, data)
                    return _TaskResult(tid, "restored", unihash, sha256_hex(data), data,
                                       t.cost, counts_lookup=True)

        missing = [d for d in deps if d not in blobs]
        if missing:
            raise KilnError(f"task {tid}: missing dependency output for {missing[0]}")
        dep_outputs = {
            d: TaskOutput(blob=blobs[d], outhash=outhashes[d], cost_spent=0) for d in deps
        }
        try:
            out = run_task(t, dep_outputs)
        except TaskExecutionError as exc:
            return _TaskResult(tid, "executed", unihash, "", b"", t.cost,
                               counts_lookup=t.cacheable, error=exc)

        if t.task_name == "fetch" and t.source_digest is not None and session.active:
            key = f"dl/{t.recipe}/{t.source_digest}"
            try:
                mirrored = session.client.downloads_get(key)
                if mirrored is None:
                    session.client.downloads_put(key, out.blob)
                elif mirrored != out.blob:
                    raise CacheError(f"downloads mirror corrupt for {key}")
            except CacheUnavailableError as exc:
                session.degrade(exc)

        if t.cacheable and session.active:
            try:
                unihash = session.client.hashserv_report(SIG_METHOD, taskhash, out.outhash)
                session.client.sstate_put(f"ss/{tid}/{unihash}", out.blob)
            except CacheUnavailableError as exc:
                session.degrade(exc)
        if t.cacheable:
            local.record(tid, unihash, out.blob)
        return _TaskResult(tid, "executed", unihash, out.outhash, out.blob,
                           t.cost, counts_lookup=t.cacheable)

    try:
        for level in levels:
            if jobs == 1 or len(level) == 1:
                results = [process(tid) for tid in level]
            else:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(process, level))
            failures: list[_TaskResult] = []
            for result in sorted(results, key=lambda r: r.task_id):
                per_task.append((result.task_id, result.disposition, result.cost))
                report.attempted += 1
                if result.counts_lookup:
                    report.wanted += 1
                    if result.disposition == "restored":
                        report.found += 1
                    else:
                        report.missed += 1
                if result.disposition == "current":
                    report.current += 1
                if result.disposition == "executed":
                    report.executed_cost += result.cost
                if result.error is not None:
                    failures.append(result)
                    continue
                unihashes[result.task_id] = result.unihash
                outhashes[result.task_id] = result.outhash
                blobs[result.task_id] = result.blob
            if failures:
                report.not_rerun = report.found + report.current
                report.per_task = tuple(per_task)
                report.failed_tasks = tuple(r.task_id for r in failures)
                report.warnings = tuple(session.warnings)
                report.validate()
                raise BuildFailure(failures[0].task_id, report)
    finally:
        session.close()

    report.not_rerun = report.found + report.current
    report.per_task = tuple(per_task)
    report.warnings = tuple(session.warnings)
    report.validate()
    if report.attempted != len(g.tasks):
        raise KilnError("attempted task count does not cover the graph")

    artifact = None
    if g.image is not None:
        meta = g.image
        artifact = ImageArtifact.compose(
            image_name=meta.image_name,
            packages=[
                (name, version, outhashes[f"{name}:package"])
                for name, version in meta.packages
            ],
            autoload_modules=meta.autoload_modules,
            rdepends=meta.rdepends,
        )
    return report, artifact


def summarize(r: BuildReport) -> str:
    """Two-line build summary in the shared-state accounting format."""
    w, f, c = r.wanted, r.found, r.current
    match = round(100 * f / w) if w else 100
    complete = round(100 * (f + c) / (w + c)) if w + c else 100
    line1 = (
        f"Sstate summary: Wanted {w} Found {f} Missed {r.missed} Current {c} "
        f"({match}% match, {complete}% complete)"
    )
    if r.failed_tasks:
        tail = f"and {len(r.failed_tasks)} failed."
    else:
        tail = "and all succeeded."
    line2 = (
        f"Tasks Summary: Attempted {r.attempted} tasks of which {r.not_rerun} "
        f"didn't need to be rerun {tail}"
    )
    return line1 + "\n" + line2
