import json
import random

import pytest

from kilnci.errors import PipelineError
from kilnci.executor import ImageArtifact
from kilnci.fixture import create_fixture_store, fixture_manifest
from kilnci.manifest import parse_manifest, sync_workspace
from kilnci.pipeline import (
    ChangeEvent,
    EditSpec,
    PipelineContext,
    apply_edit,
    parse_pipeline_config,
    plan_propagation,
    run_event,
    scenario_suite,
)

COMPONENT_CONFIG = json.dumps({
    "project": "libhelloworld",
    "stages": ["build"],
    "jobs": [{"name": "build-libhelloworld", "stage": "build", "action": "component-build"}],
    "triggers": ["meta-custom"],
})

INTEGRATOR_CONFIG = json.dumps({
    "project": "manifest",
    "stages": ["build", "test"],
    "jobs": [
        {"name": "image-build", "stage": "build", "action": "image-build"},
        {"name": "boot-test", "stage": "test", "action": "boot-test"},
    ],
    "triggers": [],
})


@pytest.fixture
def ctx(tmp_path, store, workspace):
    return PipelineContext.from_workspace(workspace.root)


def statuses(runs):
    return [(r.project, r.status) for r in runs]


class TestParseConfig:
    def test_component_config(self):
        config = parse_pipeline_config(COMPONENT_CONFIG)
        assert config.triggers == ("meta-custom",)
        assert config.jobs[0].action == "component-build"

    def test_integrator_config_with_two_stages(self):
        config = parse_pipeline_config(INTEGRATOR_CONFIG)
        assert config.stages == ("build", "test")
        assert [j.action for j in config.jobs] == ["image-build", "boot-test"]

    def test_boot_test_in_component_config_rejected(self):
        bad = json.loads(COMPONENT_CONFIG)
        bad["jobs"].append({"name": "sneaky", "stage": "build", "action": "boot-test"})
        with pytest.raises(PipelineError, match="integrator"):
            parse_pipeline_config(json.dumps(bad))

    def test_unknown_action(self):
        bad = json.loads(COMPONENT_CONFIG)
        bad["jobs"][0]["action"] = "deploy"
        with pytest.raises(PipelineError, match="unknown action"):
            parse_pipeline_config(json.dumps(bad))

    def test_job_stage_must_exist(self):
        bad = json.loads(COMPONENT_CONFIG)
        bad["jobs"][0]["stage"] = "missing"
        with pytest.raises(PipelineError, match="not in stages"):
            parse_pipeline_config(json.dumps(bad))

    def test_unknown_top_level_key(self):
        bad = json.loads(COMPONENT_CONFIG)
        bad["webhook"] = "http://x"
        with pytest.raises(PipelineError, match="unknown key"):
            parse_pipeline_config(json.dumps(bad))

    def test_invalid_json(self):
        with pytest.raises(PipelineError, match="invalid JSON"):
            parse_pipeline_config("{nope")


FIXTURE_GRAPH = {
    "libhelloworld": ("meta-custom",),
    "helloworld": ("meta-custom",),
    "hello-mod": ("meta-custom",),
    "meta-custom": ("manifest",),
    "manifest": (),
}


class TestPlanPropagation:
    def test_component_event_walks_the_full_chain(self):
        assert plan_propagation(FIXTURE_GRAPH, "libhelloworld") == [
            "libhelloworld", "meta-custom", "manifest",
        ]

    def test_sink_event_runs_alone(self):
        assert plan_propagation(FIXTURE_GRAPH, "manifest") == ["manifest"]

    def test_closure_deduplicates_shared_downstreams(self):
        for source in ("helloworld", "hello-mod"):
            plan = plan_propagation(FIXTURE_GRAPH, source)
            assert plan == [source, "meta-custom", "manifest"]
            assert plan.count("meta-custom") == 1

    def test_diamond_orders_topologically(self):
        graph = {"a": ("b", "c"), "b": ("d",), "c": ("d",), "d": ()}
        assert plan_propagation(graph, "a") == ["a", "b", "c", "d"]

    def test_cycle_detected(self):
        graph = {"a": ("b",), "b": ("a",)}
        with pytest.raises(PipelineError, match="cycle"):
            plan_propagation(graph, "a")

    def test_unknown_project(self):
        with pytest.raises(PipelineError, match="unknown project"):
            plan_propagation(FIXTURE_GRAPH, "ghost")

    def test_random_dags_match_reachability(self):
        rng = random.Random(7)
        for _ in range(25):
            n = rng.randint(1, 8)
            names = [f"p{i}" for i in range(n)]
            graph = {
                names[i]: tuple(names[j] for j in range(i + 1, n) if rng.random() < 0.4)
                for i in range(n)
            }
            source = rng.choice(names)
            plan = plan_propagation(graph, source)

            reachable = {source}
            stack = [source]
            while stack:
                for nxt in graph[stack.pop()]:
                    if nxt not in reachable:
                        reachable.add(nxt)
                        stack.append(nxt)
            assert set(plan) == reachable
            assert len(plan) == len(reachable)
            assert plan[0] == source
            position = {p: i for i, p in enumerate(plan)}
            for project in plan:
                for target in graph[project]:
                    if target in reachable:
                        assert position[project] < position[target]


class TestApplyEdit:
    def test_touch_appends_comment_to_first_source_file(self):
        tree = {"src/a.c": b"int x;\n", "readme": b"hi"}
        edited = apply_edit(tree, EditSpec("touch"), "ev1")
        assert edited["src/a.c"] == b"int x;\n/* edit ev1 */\n"
        assert tree["src/a.c"] == b"int x;\n"  # input untouched

    def test_compile_fail_appends_sentinel(self):
        tree = {"src/a.c": b"int x;"}
        edited = apply_edit(tree, EditSpec("compile-fail"), "ev1")
        assert edited["src/a.c"].endswith(b"\nCOMPILE_FAIL\n")

    def test_noop_preserves_bytes(self):
        tree = {"src/a.c": b"int x;\n"}
        assert apply_edit(tree, EditSpec("noop"), "ev1") == tree

    def test_recipe_fallback_then_notes(self):
        edited = apply_edit({"r/x.recipe": b"NAME = x\n"}, EditSpec("touch"), "e")
        assert edited["r/x.recipe"].endswith(b"# edit e\n")
        edited = apply_edit({"data.bin": b"\x00"}, EditSpec("touch"), "e")
        assert edited["notes.txt"] == b"# edit e\n"


class TestRunEvent:
    def test_successful_component_edit_cascades_to_boot_test(self, ctx):
        runs = run_event(ChangeEvent("libhelloworld", EditSpec("touch"), "evt-ok"), ctx)
        assert statuses(runs) == [
            ("libhelloworld", "passed"), ("meta-custom", "passed"), ("manifest", "passed"),
        ]
        manifest_run = runs[-1]
        assert [row[0] for row in manifest_run.stage_results] == ["build", "test"]
        assert [row[1] for row in manifest_run.stage_results] == ["image-build", "boot-test"]
        assert runs[0].triggered_by is None
        assert runs[1].triggered_by == "libhelloworld"
        assert runs[2].triggered_by == "meta-custom"

    def test_compile_fail_truncates_downstream(self, ctx):
        runs = run_event(ChangeEvent("helloworld", EditSpec("compile-fail"), "evt-bad"), ctx)
        assert statuses(runs) == [
            ("helloworld", "failed"), ("meta-custom", "not-triggered"), ("manifest", "not-triggered"),
        ]
        assert runs[1].stage_results == ()
        assert runs[2].stage_results == ()

    def test_event_on_the_integrator_runs_alone(self, ctx):
        runs = run_event(ChangeEvent("manifest", EditSpec("touch"), "evt-man"), ctx)
        assert statuses(runs) == [("manifest", "passed")]

    def test_edit_creates_revision_and_repins_manifest(self, ctx):
        run_event(ChangeEvent("libhelloworld", EditSpec("touch"), "evt-rev"), ctx)
        assert ctx.manifest.project("libhelloworld").revision == "edit0001"
        assert ctx.manifest.project("manifest").revision == "edit0001"
        # The stored manifest snapshot is self-consistent: the manifest.xml
        # inside the new revision pins that very revision.
        stored = parse_manifest(
            (ctx.store.snapshot_dir("manifest", "edit0001") / "manifest.xml").read_text()
        )
        assert stored == ctx.manifest

    def test_noop_edit_against_warm_cache_is_pure_cache_hit(self, tmp_path, cache_server, store, workspace):
        ctx = PipelineContext.from_workspace(workspace.root, cache=cache_server.endpoints)
        run_event(ChangeEvent("libhelloworld", EditSpec("touch"), "evt-warmup"), ctx)
        runs = run_event(ChangeEvent("libhelloworld", EditSpec("noop"), "evt-noop"), ctx)
        assert all(r.status == "passed" for r in runs)
        costs = {row[1]: row[3] for r in runs for row in r.stage_results}
        assert costs["build-libhelloworld"] == 0      # fully restored
        assert costs["build-layer"] == 0              # fully restored
        assert costs["image-build"] == 1              # only image_complete ran

    def test_rerunning_an_event_is_deterministic(self, tmp_path):
        digests = []
        all_statuses = []
        for side in ("a", "b"):
            base = tmp_path / side
            store = create_fixture_store(base / "store")
            ws = sync_workspace(fixture_manifest(), store, base / "ws")
            ctx = PipelineContext.from_workspace(ws.root)
            runs = run_event(ChangeEvent("helloworld", EditSpec("touch"), "evt-same"), ctx)
            all_statuses.append(statuses(runs))
            artifact = ImageArtifact.from_json_obj(json.loads(
                (ws.root / "build" / "core-image-minimal.json").read_text()
            ))
            digests.append(artifact.image_digest)
        assert all_statuses[0] == all_statuses[1]
        assert digests[0] == digests[1]

    def test_unknown_project_rejected(self, ctx):
        with pytest.raises(Exception, match="ghost"):
            run_event(ChangeEvent("ghost", EditSpec("touch"), "evt-x"), ctx)


class TestScenarioSuite:
    def test_six_scenarios_all_pass(self, ctx):
        results = scenario_suite(ctx)
        assert [r.name for r in results] == [
            "libhelloworld-ok", "libhelloworld-fail",
            "helloworld-ok", "helloworld-fail",
            "hello-mod-ok", "hello-mod-fail",
        ]
        assert all(r.verdict == "pass" for r in results), [r.detail for r in results]

    def test_cache_keeps_verdicts_and_cuts_cost(self, tmp_path, store, workspace, cache_server):
        ctx = PipelineContext.from_workspace(workspace.root, cache=cache_server.endpoints)
        results = scenario_suite(ctx)
        assert all(r.verdict == "pass" for r in results)
        costs = [r.executed_cost for r in results]
        # later success scenarios ride the warm cache
        assert costs[2] < costs[0]
        assert costs[4] < costs[0]

    def test_suite_heals_after_failures(self, ctx):
        scenario_suite(ctx)
        runs = run_event(ChangeEvent("libhelloworld", EditSpec("touch"), "evt-after"), ctx)
        assert all(r.status == "passed" for r in runs)


class TestFixtureRepoGraph:
    def test_configs_wire_the_expected_trigger_graph(self, workspace):
        from kilnci.pipeline import _load_configs

        configs = _load_configs(workspace)
        graph = {name: config.triggers for name, config in configs.items()}
        assert graph == {
            "libhelloworld": ("meta-custom",),
            "helloworld": ("meta-custom",),
            "hello-mod": ("meta-custom",),
            "meta-custom": ("manifest",),
            "manifest": (),
        }
