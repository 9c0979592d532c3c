"""Per-recipe task chains, cross-recipe wiring, and content-derived hashes.

Each component recipe expands to the fixed chain
fetch -> configure -> compile -> install -> package; the image recipe adds
rootfs and image_complete.  Task hashes mix the recipe file digest, the
source tree digest (fetch only), and the unihashes of all dependencies, so
an upstream edit invalidates exactly the tasks that can observe it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

from .errors import GraphError
from .hashing import sha256_text
from .layers import TASK_NAMES, ImageRecipe, LayerSet, Recipe, resolve_packages
from .manifest import WorkspaceState

COMPILE_SENTINEL = "COMPILE_FAIL"

IMAGE_TASK_COST = 1


@dataclass(frozen=True)
class Task:
    task_id: str
    recipe: str
    task_name: str
    # Digest of the raw recipe/image file text (drives the taskhash).
    text_digest: str
    # Digest of build-relevant content only (drives the output blob).
    semantic_digest: str
    # Tree digest of the sourced project; fetch tasks only.
    source_digest: str | None
    cost: int
    cacheable: bool
    compile_fail: bool = False


@dataclass(frozen=True)
class TaskSignature:
    taskhash: str
    unihash: str
    outhash: str | None = None

    @classmethod
    def fresh(cls, taskhash: str) -> "TaskSignature":
        # unihash defaults to the taskhash until an equivalence is learned
        return cls(taskhash=taskhash, unihash=taskhash)


@dataclass(frozen=True)
class ImageMeta:
    """What the executor needs to compose an ImageArtifact from a built graph."""

    image_name: str
    packages: tuple[tuple[str, str], ...]  # (name, version), sorted by name
    autoload_modules: tuple[str, ...]
    rdepends: tuple[tuple[str, tuple[str, ...]], ...]


@dataclass
class TaskGraph:
    tasks: dict[str, Task]
    deps: dict[str, tuple[str, ...]] = field(default_factory=dict)
    image: ImageMeta | None = None

    def dependencies(self, task_id: str) -> tuple[str, ...]:
        return self.deps.get(task_id, ())

    def edges(self) -> list[tuple[str, str]]:
        """All (dependee, dependency) pairs, sorted."""
        return sorted(
            (tid, dep) for tid, deps in self.deps.items() for dep in deps
        )

    def total_cost(self) -> int:
        return sum(t.cost for t in self.tasks.values())


def task_id(recipe: str, task_name: str) -> str:
    return f"{recipe}:{task_name}"


def _tree_has_sentinel(root: Path) -> bool:
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        try:
            text = path.read_text(encoding="utf-8")
        except (UnicodeDecodeError, OSError):
            continue
        if any(line.strip() == COMPILE_SENTINEL for line in text.splitlines()):
            return True
    return False


def build_task_graph(img: ImageRecipe, ls: LayerSet, ws: WorkspaceState) -> TaskGraph:
    """Expand the image closure (plus build-time deps) into a task DAG."""
    closure = resolve_packages(img, ls)
    visible = ls.visible_recipes()

    # Build-time DEPENDS may pull in recipes outside the runtime closure.
    to_build: dict[str, Recipe] = {r.name: r for r in closure}
    stack = [r for r in closure]
    while stack:
        recipe = stack.pop()
        for dep in recipe.depends:
            if dep in to_build:
                continue
            if dep not in visible:
                raise GraphError(
                    f"recipe {recipe.name!r} DEPENDS on {dep!r}, which does not resolve"
                )
            to_build[dep] = visible[dep]
            stack.append(visible[dep])

    sentinel_cache: dict[str, bool] = {}

    def project_state(name: str) -> tuple[str, bool]:
        entry = ws.entry(name)
        if name not in sentinel_cache:
            sentinel_cache[name] = _tree_has_sentinel(ws.root / entry.path)
        return entry.digest, sentinel_cache[name]

    tasks: dict[str, Task] = {}
    deps: dict[str, tuple[str, ...]] = {}

    for name in sorted(to_build):
        recipe = to_build[name]
        source_digest = None
        has_sentinel = False
        if recipe.src_project is not None:
            source_digest, has_sentinel = project_state(recipe.src_project)
        text_digest = recipe.text_digest()
        semantic = recipe.semantic_digest()
        for task_name in TASK_NAMES:
            tid = task_id(name, task_name)
            tasks[tid] = Task(
                task_id=tid,
                recipe=name,
                task_name=task_name,
                text_digest=text_digest,
                semantic_digest=semantic,
                source_digest=source_digest if task_name == "fetch" else None,
                cost=recipe.cost(task_name),
                cacheable=True,
                compile_fail=has_sentinel and task_name == "compile",
            )
        chain = [task_id(name, t) for t in TASK_NAMES]
        for earlier, later in zip(chain, chain[1:]):
            deps[later] = (earlier,)
        configure_deps = [task_id(d, "package") for d in sorted(recipe.depends)]
        deps[chain[1]] = tuple(sorted(configure_deps + [chain[0]]))
        deps.setdefault(chain[0], ())

    image_text = img.text_digest()
    image_semantic = img.semantic_digest()
    rootfs_id = task_id(img.name, "rootfs")
    complete_id = task_id(img.name, "image_complete")
    tasks[rootfs_id] = Task(
        task_id=rootfs_id, recipe=img.name, task_name="rootfs",
        text_digest=image_text, semantic_digest=image_semantic,
        source_digest=None, cost=IMAGE_TASK_COST, cacheable=True,
    )
    tasks[complete_id] = Task(
        task_id=complete_id, recipe=img.name, task_name="image_complete",
        text_digest=image_text, semantic_digest=image_semantic,
        source_digest=None, cost=IMAGE_TASK_COST, cacheable=False,
    )
    deps[rootfs_id] = tuple(sorted(task_id(r.name, "package") for r in closure))
    deps[complete_id] = (rootfs_id,)

    graph = TaskGraph(
        tasks=tasks,
        deps=deps,
        image=ImageMeta(
            image_name=img.name,
            packages=tuple((r.name, r.version) for r in closure),
            autoload_modules=tuple(sorted(
                r.name for r in closure if r.kernel_module and r.autoload
            )),
            rdepends=tuple((r.name, tuple(sorted(r.rdepends))) for r in closure),
        ),
    )
    topological_schedule(graph)  # raises on cycles
    return graph


def subgraph_for_recipes(g: TaskGraph, recipe_names: list[str]) -> TaskGraph:
    """Dependency closure of the given recipes' package tasks.

    Used for component pipelines, which build their own recipes (and whatever
    those need) without composing the image.
    """
    roots = []
    for name in recipe_names:
        tid = task_id(name, "package")
        if tid not in g.tasks:
            raise GraphError(f"recipe {name!r} has no package task in this graph")
        roots.append(tid)
    keep: set[str] = set()
    stack = list(roots)
    while stack:
        tid = stack.pop()
        if tid in keep:
            continue
        keep.add(tid)
        stack.extend(g.dependencies(tid))
    return TaskGraph(
        tasks={tid: g.tasks[tid] for tid in sorted(keep)},
        deps={tid: g.deps.get(tid, ()) for tid in sorted(keep)},
        image=None,
    )


def task_hash(t: Task, dep_unihashes: list[str]) -> str:
    """Content hash of a task's inputs.

    Canonical encoding: task id, recipe text digest, and the source tree
    digest (``-`` when absent), each on its own line, followed by one
    dependency unihash per line in dependency task-id order.
    """
    text = f"{t.task_id}\n{t.text_digest}\n{t.source_digest or '-'}\n"
    text += "".join(u + "\n" for u in dep_unihashes)
    return sha256_text(text)


def topological_schedule(g: TaskGraph) -> list[list[str]]:
    """Longest-path strata of the task DAG.

    Level k holds every task whose deepest dependency chain has length k;
    ids inside a level are sorted so any runner visits tasks in a stable
    order no matter how many workers it uses.
    """
    sorter = TopologicalSorter({tid: set(g.dependencies(tid)) for tid in g.tasks})
    try:
        sorter.prepare()
    except CycleError as exc:
        cycle = exc.args[1] if len(exc.args) > 1 else []
        raise GraphError("task graph cycle: " + " -> ".join(cycle)) from exc
    levels: list[list[str]] = []
    while sorter.is_active():
        ready = sorted(sorter.get_ready())
        levels.append(ready)
        for tid in ready:
            sorter.done(tid)
    return levels
