"""Coordination manifest: parse, pin, materialize, fingerprint.

The manifest is a small XML file naming every participating repository with
its workspace path and pinned revision.  Snapshots live in a local
:class:`SourceStore` keyed ``<name>/<revision>/``; syncing copies the pinned
snapshot of each project into the workspace and records a content digest per
project so two syncs of the same manifest are provably identical.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping
from xml.parsers import expat
from xml.sax.saxutils import quoteattr

from .errors import ManifestError, SyncError
from .hashing import is_token, pairs_digest, tree_digest

logger = logging.getLogger(__name__)

WORKSPACE_STATE_FILE = ".workspace.json"

_MANIFEST_CHILDREN = {"remote", "default", "project"}
_ATTRS = {
    "manifest": set(),
    "remote": {"name", "fetch"},
    "default": {"revision", "remote"},
    "project": {"name", "path", "revision", "remote"},
}
_REQUIRED_ATTRS = {
    "remote": {"name", "fetch"},
    "default": {"revision"},
    "project": {"name", "path"},
}


@dataclass(frozen=True)
class RemoteSpec:
    name: str
    fetch: str


@dataclass(frozen=True)
class ProjectEntry:
    name: str
    path: str
    revision: str
    remote: str | None = None


@dataclass(frozen=True)
class Manifest:
    remotes: tuple[RemoteSpec, ...] = ()
    default_revision: str | None = None
    default_remote: str | None = None
    projects: tuple[ProjectEntry, ...] = ()

    def project(self, name: str) -> ProjectEntry:
        for entry in self.projects:
            if entry.name == name:
                return entry
        raise ManifestError(f"project {name!r} not in manifest")

    def with_pins(self, pins: Mapping[str, str]) -> "Manifest":
        """Copy of this manifest with the given projects re-pinned."""
        unknown = set(pins) - {p.name for p in self.projects}
        if unknown:
            raise ManifestError(f"cannot pin unknown projects: {sorted(unknown)}")
        projects = tuple(
            ProjectEntry(p.name, p.path, pins.get(p.name, p.revision), p.remote)
            for p in self.projects
        )
        return Manifest(self.remotes, self.default_revision, self.default_remote, projects)


@dataclass(frozen=True)
class WorkspaceEntry:
    name: str
    path: str
    revision: str
    digest: str


@dataclass(frozen=True)
class WorkspaceState:
    root: Path
    entries: tuple[WorkspaceEntry, ...]

    def entry(self, name: str) -> WorkspaceEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise SyncError(f"project {name!r} not in workspace")

    def project_dir(self, name: str) -> Path:
        return self.root / self.entry(name).path


def _check_relative_path(path: str, where: str) -> None:
    if not path:
        raise ManifestError(f"{where}: empty path")
    if path.startswith("/") or path.startswith("\\"):
        raise ManifestError(f"{where}: path {path!r} must be relative")
    parts = path.split("/")
    if any(part in ("", ".", "..") for part in parts):
        raise ManifestError(f"{where}: path {path!r} contains empty or dot segments")


def _check_token(value: str, what: str, where: str) -> None:
    if not is_token(value):
        raise ManifestError(f"{where}: {what} {value!r} is not a valid token")


class _ManifestBuilder:
    """Expat-driven builder tracking line numbers for error context."""

    def __init__(self) -> None:
        self.parser = expat.ParserCreate()
        self.parser.StartElementHandler = self._start
        self.parser.EndElementHandler = self._end
        self.parser.CharacterDataHandler = self._chardata
        self.depth = 0
        self.saw_root = False
        self.saw_default = False
        self.remotes: list[RemoteSpec] = []
        self.default_revision: str | None = None
        self.default_remote: str | None = None
        self.raw_projects: list[tuple[dict[str, str], int]] = []

    def _where(self) -> str:
        return f"line {self.parser.CurrentLineNumber}"

    def _start(self, tag: str, attrs: dict[str, str]) -> None:
        where = self._where()
        if self.depth == 0:
            if tag != "manifest":
                raise ManifestError(f"{where}: root element must be <manifest>, got <{tag}>")
            if attrs:
                raise ManifestError(f"{where}: <manifest> takes no attributes")
            self.saw_root = True
        elif self.depth == 1:
            if tag not in _MANIFEST_CHILDREN:
                raise ManifestError(f"{where}: unknown element <{tag}>")
            allowed = _ATTRS[tag]
            unknown = set(attrs) - allowed
            if unknown:
                raise ManifestError(
                    f"{where}: unknown attribute(s) {sorted(unknown)} on <{tag}>"
                )
            missing = _REQUIRED_ATTRS[tag] - set(attrs)
            if missing:
                raise ManifestError(
                    f"{where}: <{tag}> missing attribute(s) {sorted(missing)}"
                )
            if tag == "remote":
                self.remotes.append(RemoteSpec(attrs["name"], attrs["fetch"]))
            elif tag == "default":
                if self.saw_default:
                    raise ManifestError(f"{where}: duplicate <default> element")
                self.saw_default = True
                self.default_revision = attrs["revision"]
                self.default_remote = attrs.get("remote")
            else:
                self.raw_projects.append((dict(attrs), self.parser.CurrentLineNumber))
        else:
            raise ManifestError(f"{where}: unexpected nested element <{tag}>")
        self.depth += 1

    def _end(self, tag: str) -> None:
        self.depth -= 1

    def _chardata(self, data: str) -> None:
        if data.strip():
            raise ManifestError(f"{self._where()}: unexpected text content {data.strip()!r}")


def parse_manifest(text: str) -> Manifest:
    """Parse manifest XML; unknown elements/attributes are hard errors."""
    builder = _ManifestBuilder()
    try:
        builder.parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise ManifestError(f"malformed XML: {exc}") from exc
    if not builder.saw_root:
        raise ManifestError("malformed XML: no root element")

    remote_names = [r.name for r in builder.remotes]
    if len(set(remote_names)) != len(remote_names):
        raise ManifestError("duplicate remote name")
    for remote in builder.remotes:
        _check_token(remote.name, "remote name", "remote")
    if builder.default_remote is not None and builder.default_remote not in remote_names:
        raise ManifestError(
            f"default remote {builder.default_remote!r} not declared in remotes"
        )

    seen_names: dict[str, int] = {}
    seen_paths: dict[str, int] = {}
    projects = []
    for attrs, line in builder.raw_projects:
        where = f"line {line}"
        name = attrs["name"]
        path = attrs["path"]
        _check_token(name, "project name", where)
        _check_relative_path(path, where)
        if name in seen_names:
            raise ManifestError(
                f"{where}: duplicate project name {name!r} (first at line {seen_names[name]})"
            )
        if path in seen_paths:
            raise ManifestError(
                f"{where}: duplicate project path {path!r} (first at line {seen_paths[path]})"
            )
        seen_names[name] = line
        seen_paths[path] = line
        revision = attrs.get("revision", builder.default_revision)
        if revision is None:
            raise ManifestError(
                f"{where}: project {name!r} has no revision and manifest has no default"
            )
        _check_token(revision, "revision", where)
        remote = attrs.get("remote", builder.default_remote)
        if remote is not None and remote not in remote_names:
            raise ManifestError(f"{where}: project {name!r} references unknown remote {remote!r}")
        projects.append(ProjectEntry(name, path, revision, remote))

    return Manifest(
        remotes=tuple(builder.remotes),
        default_revision=builder.default_revision,
        default_remote=builder.default_remote,
        projects=tuple(projects),
    )


def serialize_manifest(m: Manifest) -> str:
    """Emit manifest XML that parses back to an equal Manifest."""
    lines = ["<manifest>"]
    for remote in m.remotes:
        lines.append(f"  <remote name={quoteattr(remote.name)} fetch={quoteattr(remote.fetch)}/>")
    if m.default_revision is not None or m.default_remote is not None:
        attrs = []
        if m.default_revision is not None:
            attrs.append(f"revision={quoteattr(m.default_revision)}")
        if m.default_remote is not None:
            attrs.append(f"remote={quoteattr(m.default_remote)}")
        lines.append("  <default " + " ".join(attrs) + "/>")
    for project in m.projects:
        attrs = [f"name={quoteattr(project.name)}", f"path={quoteattr(project.path)}"]
        attrs.append(f"revision={quoteattr(project.revision)}")
        if project.remote is not None:
            attrs.append(f"remote={quoteattr(project.remote)}")
        lines.append("  <project " + " ".join(attrs) + "/>")
    lines.append("</manifest>")
    return "\n".join(lines) + "\n"


FetchFn = Callable[[str, str, Path], None]


class SourceStore:
    """Directory of immutable project snapshots keyed ``<name>/<revision>/``.

    Stands in for hosted version control: revisions are opaque tokens
    resolved exactly.  An optional ``fetch`` hook is invoked on a missing
    snapshot before giving up, so tests can inject lazy population.
    """

    def __init__(self, root: Path | str, fetch: FetchFn | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._fetch = fetch

    def snapshot_dir(self, name: str, revision: str) -> Path:
        return self.root / name / revision

    def has_snapshot(self, name: str, revision: str) -> bool:
        return self.snapshot_dir(name, revision).is_dir()

    def resolve(self, name: str, revision: str) -> Path:
        path = self.snapshot_dir(name, revision)
        if not path.is_dir() and self._fetch is not None:
            path.mkdir(parents=True, exist_ok=True)
            try:
                self._fetch(name, revision, path)
            except Exception:
                shutil.rmtree(path, ignore_errors=True)
                raise
            if not any(path.iterdir()):
                path.rmdir()
        if not path.is_dir():
            raise SyncError(f"missing snapshot for project {name!r} at revision {revision!r}")
        return path

    def add_snapshot(self, name: str, revision: str, files: Mapping[str, str | bytes]) -> str:
        """Create an immutable snapshot from a path->content mapping."""
        if not is_token(name) or not is_token(revision):
            raise SyncError(f"invalid snapshot key {name!r}/{revision!r}")
        dest = self.snapshot_dir(name, revision)
        if dest.exists():
            raise SyncError(f"snapshot {name}/{revision} already exists")
        dest.mkdir(parents=True)
        for rel, content in files.items():
            _check_relative_path(rel, f"snapshot {name}/{revision}")
            target = dest / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            data = content.encode("utf-8") if isinstance(content, str) else content
            target.write_bytes(data)
        return tree_digest(dest)

    def read_tree(self, name: str, revision: str) -> dict[str, bytes]:
        base = self.resolve(name, revision)
        return {
            p.relative_to(base).as_posix(): p.read_bytes()
            for p in sorted(base.rglob("*"))
            if p.is_file()
        }

    def revisions(self, name: str) -> list[str]:
        project_dir = self.root / name
        if not project_dir.is_dir():
            return []
        return sorted(p.name for p in project_dir.iterdir() if p.is_dir())

    def next_revision(self, name: str) -> str:
        """Deterministic fresh revision token: edit0001, edit0002, ..."""
        existing = set(self.revisions(name))
        n = 1
        while f"edit{n:04d}" in existing:
            n += 1
        return f"edit{n:04d}"


def _load_sync_state(root: Path) -> dict:
    state_path = root / WORKSPACE_STATE_FILE
    if not state_path.is_file():
        return {}
    try:
        return json.loads(state_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise SyncError(f"corrupt workspace state file {state_path}: {exc}") from exc


def sync_workspace(m: Manifest, store: SourceStore, root: Path | str) -> WorkspaceState:
    """Materialize every pinned snapshot under ``root`` and digest the result.

    Idempotent: re-running with identical inputs leaves the tree untouched.
    A target path that exists but was not produced by a previous sync is a
    collision and aborts before anything is overwritten.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SyncError(f"cannot create workspace root {root}: {exc}") from exc

    previous = _load_sync_state(root)
    managed_paths = {e["path"] for e in previous.get("entries", [])}

    # Resolve everything first so a missing snapshot aborts before any copy.
    resolved: list[tuple[ProjectEntry, Path, str]] = []
    for project in sorted(m.projects, key=lambda p: p.name):
        snapshot = store.resolve(project.name, project.revision)
        resolved.append((project, snapshot, tree_digest(snapshot)))

    entries = []
    for project, snapshot, digest in resolved:
        target = root / project.path
        if target.exists():
            if project.path not in managed_paths:
                raise SyncError(
                    f"path collision: {target} exists but is not managed by this workspace"
                )
            if tree_digest(target) != digest:
                shutil.rmtree(target)
                shutil.copytree(snapshot, target)
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copytree(snapshot, target)
        entries.append(WorkspaceEntry(project.name, project.path, project.revision, digest))

    # Drop directories managed by an earlier sync but absent from this manifest.
    current_paths = {e.path for e in entries}
    for stale in sorted(managed_paths - current_paths):
        stale_dir = root / stale
        if stale_dir.exists():
            shutil.rmtree(stale_dir)

    entries.sort(key=lambda e: e.name)
    state = {
        "store": str(Path(store.root).resolve()),
        "entries": [vars(e) for e in entries],
    }
    (root / WORKSPACE_STATE_FILE).write_text(
        json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info("synced %d projects into %s", len(entries), root)
    return WorkspaceState(root=root, entries=tuple(entries))


def load_workspace(root: Path | str) -> tuple[WorkspaceState, Path]:
    """Reload a previously synced workspace; returns (state, store root)."""
    root = Path(root)
    state = _load_sync_state(root)
    if not state:
        raise SyncError(f"{root} is not a synced workspace (no {WORKSPACE_STATE_FILE})")
    entries = tuple(WorkspaceEntry(**e) for e in state["entries"])
    return WorkspaceState(root=root, entries=entries), Path(state["store"])


def workspace_fingerprint(ws: WorkspaceState) -> str:
    """SHA-256 over sorted (name, revision, content digest) triples."""
    triples = sorted((e.name, e.revision, e.digest) for e in ws.entries)
    return pairs_digest(triples)
