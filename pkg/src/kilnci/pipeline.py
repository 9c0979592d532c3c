"""Dependency-triggered pipeline cascades across the repository graph.

Each project carries a ``pipeline.json`` naming its stages, jobs, and the
downstream projects it triggers.  A change event creates a new immutable
revision, re-pins the coordination manifest, and then executes every
reachable project's pipeline in topological order; a failure cuts the chain
and downstream projects are recorded as not-triggered.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from .boottest import default_boot_spec, run_boot_test
from .cache import CacheEndpoints
from .errors import BuildFailure, KilnError, PipelineError
from .executor import ImageArtifact, LocalState, execute_build
from .hashing import is_token
from .layers import load_layers
from .manifest import Manifest, SourceStore, load_workspace, parse_manifest, serialize_manifest, sync_workspace
from .taskgraph import build_task_graph, subgraph_for_recipes

logger = logging.getLogger(__name__)

ACTIONS = ("component-build", "image-build", "boot-test")
INTEGRATOR_ACTIONS = ("image-build", "boot-test")

PIPELINE_FILE = "pipeline.json"


@dataclass(frozen=True)
class PipelineJob:
    name: str
    stage: str
    action: str


@dataclass(frozen=True)
class PipelineConfig:
    project: str
    stages: tuple[str, ...]
    jobs: tuple[PipelineJob, ...]
    triggers: tuple[str, ...]


@dataclass(frozen=True)
class EditSpec:
    kind: str = "touch"  # touch | compile-fail | noop
    path: str | None = None


@dataclass(frozen=True)
class ChangeEvent:
    project: str
    edit: EditSpec
    event_id: str


@dataclass(frozen=True)
class PipelineRun:
    event_id: str
    project: str
    status: str  # passed | failed | not-triggered
    stage_results: tuple[tuple[str, str, str, int], ...]  # (stage, job, status, cost)
    triggered_by: str | None = None

    def to_json_obj(self) -> dict:
        return {
            "event_id": self.event_id,
            "project": self.project,
            "status": self.status,
            "stage_results": [list(row) for row in self.stage_results],
            "triggered_by": self.triggered_by,
        }


def parse_pipeline_config(text: str, what: str = "pipeline.json") -> PipelineConfig:
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise PipelineError(f"{what}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise PipelineError(f"{what}: top level must be an object")
    unknown = set(obj) - {"project", "stages", "jobs", "triggers"}
    if unknown:
        raise PipelineError(f"{what}: unknown key(s) {sorted(unknown)}")
    for required in ("project", "stages", "jobs", "triggers"):
        if required not in obj:
            raise PipelineError(f"{what}: missing key {required!r}")

    project = obj["project"]
    if not isinstance(project, str) or not is_token(project):
        raise PipelineError(f"{what}: project must be a token")
    stages = obj["stages"]
    if not isinstance(stages, list) or not all(isinstance(s, str) and is_token(s) for s in stages):
        raise PipelineError(f"{what}: stages must be a list of tokens")
    if len(set(stages)) != len(stages):
        raise PipelineError(f"{what}: duplicate stage names")
    triggers = obj["triggers"]
    if not isinstance(triggers, list) or not all(isinstance(t, str) and is_token(t) for t in triggers):
        raise PipelineError(f"{what}: triggers must be a list of tokens")
    if len(set(triggers)) != len(triggers):
        raise PipelineError(f"{what}: duplicate triggers")

    jobs = []
    for i, raw in enumerate(obj["jobs"]):
        if not isinstance(raw, dict) or set(raw) != {"name", "stage", "action"}:
            raise PipelineError(f"{what}: job #{i} must have exactly name/stage/action")
        if raw["action"] not in ACTIONS:
            raise PipelineError(f"{what}: job #{i}: unknown action {raw['action']!r}")
        if raw["stage"] not in stages:
            raise PipelineError(f"{what}: job #{i}: stage {raw['stage']!r} not in stages")
        if raw["action"] in INTEGRATOR_ACTIONS and triggers:
            raise PipelineError(
                f"{what}: job #{i}: action {raw['action']!r} is only valid in the "
                "integrator project's config (a config with no downstream triggers)"
            )
        jobs.append(PipelineJob(raw["name"], raw["stage"], raw["action"]))

    return PipelineConfig(
        project=project, stages=tuple(stages), jobs=tuple(jobs), triggers=tuple(triggers)
    )


def plan_propagation(repo_graph: dict[str, tuple[str, ...]], event_project: str) -> list[str]:
    """Reachability closure from the event project, in topological order."""
    if event_project not in repo_graph:
        raise PipelineError(f"unknown project {event_project!r}")
    for project, triggers in repo_graph.items():
        for trigger in triggers:
            if trigger not in repo_graph:
                raise PipelineError(f"{project!r} triggers unknown project {trigger!r}")

    reachable = set()
    stack = [event_project]
    while stack:
        project = stack.pop()
        if project in reachable:
            continue
        reachable.add(project)
        stack.extend(repo_graph[project])

    indegree = {p: 0 for p in reachable}
    for project in reachable:
        for trigger in repo_graph[project]:
            if trigger in reachable:
                indegree[trigger] += 1
    ready = sorted(p for p, d in indegree.items() if d == 0)
    order: list[str] = []
    while ready:
        project = ready.pop(0)
        order.append(project)
        for trigger in sorted(repo_graph[project]):
            if trigger not in reachable:
                continue
            indegree[trigger] -= 1
            if indegree[trigger] == 0:
                ready.append(trigger)
                ready.sort()
    if len(order) != len(reachable):
        raise PipelineError("trigger graph contains a cycle")
    return order


@dataclass
class PipelineContext:
    """Mutable orchestration state: store, workspace, and current pins."""

    store: SourceStore
    workspace_root: Path
    manifest: Manifest
    cache: CacheEndpoints | None = None
    jobs: int = 1
    last_artifact: ImageArtifact | None = field(default=None, init=False)

    @classmethod
    def from_workspace(cls, workspace_root: Path | str,
                       cache: CacheEndpoints | None = None, jobs: int = 1) -> "PipelineContext":
        ws, store_root = load_workspace(workspace_root)
        store = SourceStore(store_root)
        integrator = _find_integrator_dir(ws)
        manifest = parse_manifest((integrator / "manifest.xml").read_text(encoding="utf-8"))
        return cls(store=store, workspace_root=Path(workspace_root),
                   manifest=manifest, cache=cache, jobs=jobs)

    def state_dir(self, event_id: str, project: str) -> Path:
        return self.workspace_root / ".ci-state" / event_id / project


def _find_integrator_dir(ws) -> Path:
    hits = [ws.root / e.path for e in ws.entries if (ws.root / e.path / "manifest.xml").is_file()]
    if len(hits) != 1:
        raise PipelineError(
            f"expected exactly one project holding manifest.xml, found {len(hits)}"
        )
    return hits[0]


def _integrator_name(ws) -> str:
    names = [e.name for e in ws.entries if (ws.root / e.path / "manifest.xml").is_file()]
    if len(names) != 1:
        raise PipelineError(
            f"expected exactly one project holding manifest.xml, found {len(names)}"
        )
    return names[0]


def _default_edit_target(tree: dict[str, bytes]) -> str:
    for suffix in (".c", ".recipe"):
        matches = sorted(path for path in tree if path.endswith(suffix))
        if matches:
            return matches[0]
    return "notes.txt"


def apply_edit(tree: dict[str, bytes], edit: EditSpec, event_id: str) -> dict[str, bytes]:
    """Return a copy of the snapshot tree with the edit applied."""
    tree = dict(tree)
    if edit.kind == "noop":
        return tree
    target = edit.path or _default_edit_target(tree)
    if edit.kind == "compile-fail":
        line = "COMPILE_FAIL"
    elif edit.kind == "touch":
        marker = f"edit {event_id}"
        line = f"/* {marker} */" if target.endswith((".c", ".h")) else f"# {marker}"
    else:
        raise PipelineError(f"unknown edit kind {edit.kind!r}")
    existing = tree.get(target, b"")
    if existing and not existing.endswith(b"\n"):
        existing += b"\n"
    tree[target] = existing + line.encode("utf-8") + b"\n"
    return tree


def _load_configs(ws) -> dict[str, PipelineConfig]:
    configs: dict[str, PipelineConfig] = {}
    for entry in ws.entries:
        path = ws.root / entry.path / PIPELINE_FILE
        if not path.is_file():
            continue
        config = parse_pipeline_config(path.read_text(encoding="utf-8"), str(path))
        if config.project != entry.name:
            raise PipelineError(
                f"{path}: config names project {config.project!r} but lives in {entry.name!r}"
            )
        configs[entry.name] = config
    return configs


def _validate_assembly(configs: dict[str, PipelineConfig], integrator: str) -> None:
    for config in configs.values():
        for trigger in config.triggers:
            if trigger not in configs:
                raise PipelineError(
                    f"project {config.project!r} triggers {trigger!r}, which has no pipeline config"
                )
        if config.project != integrator:
            for job in config.jobs:
                if job.action in INTEGRATOR_ACTIONS:
                    raise PipelineError(
                        f"project {config.project!r} declares integrator action {job.action!r}"
                    )


def _fresh_state(ctx: PipelineContext, event_id: str, project: str) -> LocalState:
    state_dir = ctx.state_dir(event_id, project)
    if state_dir.exists():
        shutil.rmtree(state_dir)
    return LocalState(state_dir)


def _run_pipeline(ctx: PipelineContext, ws, config: PipelineConfig,
                  ev: ChangeEvent, triggered_by: str | None) -> PipelineRun:
    stage_results: list[tuple[str, str, str, int]] = []
    artifact: ImageArtifact | None = None
    failed = False

    for stage in config.stages:
        if failed:
            break
        for job in config.jobs:
            if job.stage != stage:
                continue
            status, cost = "passed", 0
            try:
                if job.action == "component-build":
                    ls = load_layers(ws)
                    image = _sole_image(ls)
                    graph = build_task_graph(image, ls, ws)
                    recipes = [r.name for r in ls.recipes_from_project(config.project)]
                    if not recipes:
                        raise PipelineError(
                            f"project {config.project!r} provides no recipes to build"
                        )
                    sub = subgraph_for_recipes(graph, recipes)
                    report, _ = execute_build(
                        sub, ctx.cache, _fresh_state(ctx, ev.event_id, config.project), ctx.jobs
                    )
                    cost = report.executed_cost
                elif job.action == "image-build":
                    ws = sync_workspace(ctx.manifest, ctx.store, ctx.workspace_root)
                    ls = load_layers(ws)
                    image = _sole_image(ls)
                    graph = build_task_graph(image, ls, ws)
                    report, artifact = execute_build(
                        graph, ctx.cache, _fresh_state(ctx, ev.event_id, config.project), ctx.jobs
                    )
                    cost = report.executed_cost
                    ctx.last_artifact = artifact
                    _write_artifact(ws.root, artifact)
                elif job.action == "boot-test":
                    if artifact is None:
                        raise PipelineError("boot-test requires an image-build job earlier in the run")
                    result = run_boot_test(artifact, default_boot_spec())
                    if not result.passed:
                        status = "failed"
                else:  # unreachable; parse validates actions
                    raise PipelineError(f"unknown action {job.action!r}")
            except BuildFailure as exc:
                status, cost = "failed", exc.report.executed_cost
                logger.info("%s/%s failed: %s", config.project, job.name, exc)
            except KilnError as exc:
                status = "failed"
                logger.info("%s/%s failed: %s", config.project, job.name, exc)
            stage_results.append((stage, job.name, status, cost))
            if status == "failed":
                failed = True
                break

    return PipelineRun(
        event_id=ev.event_id,
        project=config.project,
        status="failed" if failed else "passed",
        stage_results=tuple(stage_results),
        triggered_by=triggered_by,
    )


def _sole_image(ls):
    images = ls.visible_images()
    if len(images) != 1:
        raise PipelineError(f"expected exactly one image recipe, found {sorted(images)}")
    return next(iter(images.values()))


def _write_artifact(root: Path, artifact: ImageArtifact) -> None:
    out_dir = root / "build"
    out_dir.mkdir(exist_ok=True)
    (out_dir / f"{artifact.image_name}.json").write_text(
        artifact.to_json() + "\n", encoding="utf-8"
    )


def run_event(ev: ChangeEvent, ctx: PipelineContext) -> list[PipelineRun]:
    """Apply the edit, re-pin the manifest, and run the triggered cascade.

    The edited project gets a fresh immutable revision; the coordination
    project gets one too, holding the updated manifest (when the event hits
    the coordination project itself, a single revision carries both).
    """
    if not is_token(ev.event_id):
        raise PipelineError(f"event id {ev.event_id!r} is not a token")
    project = ev.project
    entry = ctx.manifest.project(project)  # raises on unknown project

    ws = sync_workspace(ctx.manifest, ctx.store, ctx.workspace_root)
    integrator = _integrator_name(ws)

    tree = ctx.store.read_tree(project, entry.revision)
    edited = apply_edit(tree, ev.edit, ev.event_id)
    new_rev = ctx.store.next_revision(project)
    if project == integrator:
        manifest = ctx.manifest.with_pins({project: new_rev})
        edited["manifest.xml"] = serialize_manifest(manifest).encode("utf-8")
        ctx.store.add_snapshot(project, new_rev, edited)
    else:
        man_entry = ctx.manifest.project(integrator)
        man_rev = ctx.store.next_revision(integrator)
        manifest = ctx.manifest.with_pins({project: new_rev, integrator: man_rev})
        man_tree = ctx.store.read_tree(integrator, man_entry.revision)
        man_tree["manifest.xml"] = serialize_manifest(manifest).encode("utf-8")
        ctx.store.add_snapshot(project, new_rev, edited)
        ctx.store.add_snapshot(integrator, man_rev, man_tree)
    ctx.manifest = manifest

    ws = sync_workspace(ctx.manifest, ctx.store, ctx.workspace_root)
    configs = _load_configs(ws)
    _validate_assembly(configs, integrator)
    if project not in configs:
        raise PipelineError(f"project {project!r} has no pipeline config")
    repo_graph = {name: config.triggers for name, config in configs.items()}
    plan = plan_propagation(repo_graph, project)

    runs: list[PipelineRun] = []
    failed_upstream = False
    for i, name in enumerate(plan):
        triggered_by = next(
            (up for up in plan[:i] if name in configs[up].triggers), None
        )
        if failed_upstream:
            runs.append(PipelineRun(ev.event_id, name, "not-triggered", (), triggered_by))
            continue
        run = _run_pipeline(ctx, ws, configs[name], ev, triggered_by)
        runs.append(run)
        if run.status == "failed":
            failed_upstream = True
    return runs


@dataclass(frozen=True)
class ScenarioResult:
    name: str
    expected: tuple[tuple[str, str], ...]  # (project, status) in plan order
    actual: tuple[tuple[str, str], ...]
    verdict: str  # pass | fail
    detail: str = ""
    executed_cost: int = 0

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "expected": [list(p) for p in self.expected],
            "actual": [list(p) for p in self.actual],
            "verdict": self.verdict,
            "detail": self.detail,
            "executed_cost": self.executed_cost,
        }


def scenario_suite(ctx: PipelineContext,
                   components: tuple[str, ...] = ("libhelloworld", "helloworld", "hello-mod"),
                   ) -> list[ScenarioResult]:
    """Run the six-scenario validation: each component gets one successful
    edit and one deliberately broken one.

    A broken scenario leaves the store pinned at the failing revision, so the
    suite restores the previous pins before moving on.
    """
    results: list[ScenarioResult] = []
    counter = 0
    for component in components:
        for kind, expect_pass in (("ok", True), ("fail", False)):
            counter += 1
            event = ChangeEvent(
                project=component,
                edit=EditSpec("touch" if expect_pass else "compile-fail"),
                event_id=f"scenario-{counter:02d}-{component}-{kind}",
            )
            pins_before = ctx.manifest
            runs = run_event(event, ctx)
            actual = tuple((r.project, r.status) for r in runs)
            if expect_pass:
                expected = tuple((r.project, "passed") for r in runs)
            else:
                expected = tuple(
                    (r.project, "failed" if i == 0 else "not-triggered")
                    for i, r in enumerate(runs)
                )
            mismatches = [f"{p}: expected {e}, got {a}"
                          for (p, e), (_, a) in zip(expected, actual) if e != a]
            if expect_pass:
                boot_jobs = [row for r in runs for row in r.stage_results if row[1] == "boot-test"]
                if not boot_jobs:
                    mismatches.append("no boot-test job ran")
                elif any(row[2] != "passed" for row in boot_jobs):
                    mismatches.append("boot-test did not pass")
            results.append(ScenarioResult(
                name=f"{component}-{kind}",
                expected=expected,
                actual=actual,
                verdict="pass" if not mismatches else "fail",
                detail="; ".join(mismatches),
                executed_cost=sum(
                    row[3] for r in runs for row in r.stage_results
                ),
            ))
            if not expect_pass:
                ctx.manifest = pins_before  # heal: un-pin the broken revision
    return results
