"""Single entry point: every subsystem as a subcommand.

Exit codes: 0 success, 1 build/test failure, 2 usage or configuration error.
``CI_CACHE_HOST`` supplies a default cache host; the accepted forms are
``HOST`` (default ports) and ``HOST:HASHSERV:DOWNLOADS:SSTATE``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import boottest
from .cache import CacheEndpoints, serve
from .errors import BuildFailure, KilnError
from .executor import BuildReport, ImageArtifact, LocalState, execute_build, summarize
from .layers import load_layers
from .manifest import SourceStore, load_workspace, parse_manifest, sync_workspace, workspace_fingerprint
from .pipeline import ChangeEvent, EditSpec, PipelineContext, run_event, scenario_suite
from .taskgraph import build_task_graph

logger = logging.getLogger(__name__)


def parse_cache_host(value: str | None) -> CacheEndpoints | None:
    if not value:
        return None
    parts = value.split(":")
    if len(parts) == 1:
        return CacheEndpoints(host=parts[0])
    if len(parts) == 4:
        try:
            return CacheEndpoints(
                host=parts[0],
                hashserv_port=int(parts[1]),
                downloads_port=int(parts[2]),
                sstate_port=int(parts[3]),
            )
        except ValueError as exc:
            raise KilnError(f"bad cache host {value!r}: {exc}") from exc
    raise KilnError(f"bad cache host {value!r}: expected HOST or HOST:P1:P2:P3")


def _cache_from_args(args) -> CacheEndpoints | None:
    return parse_cache_host(args.cache_host or os.environ.get("CI_CACHE_HOST"))


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")


def _write_report(report: BuildReport, label: str, path: Path) -> None:
    envelope = {"label": label, "timestamp": _timestamp(), "report": report.to_json_obj()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(envelope, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _store_report(report: BuildReport, label: str, args) -> None:
    if args.report:
        _write_report(report, label, Path(args.report))
    elif args.report_dir:
        out = Path(args.report_dir) / f"{label}-{_timestamp()}.json"
        _write_report(report, label, out)


def cmd_cache_serve(args) -> int:
    cfg = CacheEndpoints(
        host=args.host,
        hashserv_port=args.hashserv_port,
        downloads_port=args.downloads_port,
        sstate_port=args.sstate_port,
    )
    server = serve(cfg, Path(args.data_dir))
    ep = server.endpoints
    print(f"cache server listening on {ep.host} "
          f"(hashserv {ep.hashserv_port}, downloads {ep.downloads_port}, sstate {ep.sstate_port})",
          flush=True)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_sync(args) -> int:
    manifest = parse_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    store = SourceStore(args.store)
    ws = sync_workspace(manifest, store, args.workspace)
    print(f"synced {len(ws.entries)} projects into {ws.root}")
    print(f"workspace fingerprint: {workspace_fingerprint(ws)}")
    return 0


def cmd_build(args) -> int:
    ws, store_root = load_workspace(args.workspace)
    ls = load_layers(ws)
    image = ls.image(args.image)
    graph = build_task_graph(image, ls, ws)
    local = LocalState(args.local_state or Path(args.workspace) / ".build-state")
    cache = _cache_from_args(args)
    label = args.label or args.image
    try:
        report, artifact = execute_build(graph, cache, local, jobs=args.jobs)
    except BuildFailure as exc:
        print(summarize(exc.report))
        print(f"build failed at task {exc.task_id}", file=sys.stderr)
        _store_report(exc.report, label, args)
        return 1
    print(summarize(report))
    for warning in report.warnings:
        print(f"WARNING: {warning}", file=sys.stderr)
    assert artifact is not None
    out_dir = ws.root / "build"
    out_dir.mkdir(exist_ok=True)
    artifact_path = out_dir / f"{artifact.image_name}.json"
    artifact_path.write_text(artifact.to_json() + "\n", encoding="utf-8")
    print(f"image artifact: {artifact_path}")
    print(f"image digest: {artifact.image_digest}")
    _store_report(report, label, args)
    return 0


def cmd_boot_test(args) -> int:
    spec = boottest.default_boot_spec()
    if args.spec:
        spec = boottest.BootTestSpec.from_json_obj(
            json.loads(Path(args.spec).read_text(encoding="utf-8"))
        )
    if args.emulator_cmd:
        transcript = boottest.run_external_boot(args.image, args.emulator_cmd, args.timeout)
        result = boottest.evaluate_spec(transcript, spec)
    else:
        artifact = ImageArtifact.from_json_obj(
            json.loads(Path(args.image).read_text(encoding="utf-8"))
        )
        result = boottest.run_boot_test(artifact, spec)
    print(json.dumps(result.to_json_obj(), sort_keys=True))
    print(result.summary_text())
    return 0 if result.passed else 1


def _parse_event(value: str) -> tuple[str, EditSpec]:
    project, _, suffix = value.partition(":")
    if not project:
        raise KilnError(f"bad event {value!r}: expected PROJECT[:fail]")
    if suffix == "":
        return project, EditSpec("touch")
    if suffix == "fail":
        return project, EditSpec("compile-fail")
    raise KilnError(f"bad event {value!r}: only the :fail suffix is supported")


def cmd_pipeline_run(args) -> int:
    project, edit = _parse_event(args.event)
    ctx = PipelineContext.from_workspace(args.workspace, cache=_cache_from_args(args), jobs=args.jobs)
    event = ChangeEvent(project=project, edit=edit, event_id=f"evt-{_timestamp()}")
    runs = run_event(event, ctx)
    for run in runs:
        print(f"{run.project:<16} {run.status}")
        for stage, job, status, cost in run.stage_results:
            print(f"  {stage}/{job}: {status} (cost {cost})")
    return 0 if all(r.status == "passed" for r in runs) else 1


def cmd_scenarios_run(args) -> int:
    ctx = PipelineContext.from_workspace(args.workspace, cache=_cache_from_args(args), jobs=args.jobs)
    results = scenario_suite(ctx)
    table = [r.to_json_obj() for r in results]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(table, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for r in results:
        print(f"{r.name:<24} {r.verdict}" + (f"  ({r.detail})" if r.detail else ""))
    passed = sum(1 for r in results if r.verdict == "pass")
    print(f"{passed}/{len(results)} scenarios passed; verdicts written to {args.out}")
    return 0 if passed == len(results) else 1


def cmd_report(args) -> int:
    report_dir = Path(args.report_dir or ".")
    files = sorted(report_dir.glob("*.json"))
    rows = []
    for path in files:
        try:
            envelope = json.loads(path.read_text(encoding="utf-8"))
            report = BuildReport.from_json_obj(envelope["report"])
        except (ValueError, KeyError):
            continue
        match = round(100 * report.found / report.wanted) if report.wanted else 100
        rows.append({
            "label": envelope.get("label", path.stem),
            "timestamp": envelope.get("timestamp", ""),
            "executed_cost": report.executed_cost,
            "total_cost": report.total_cost,
            "match_percent": match,
        })
    if not rows:
        raise KilnError(f"no build reports found under {report_dir}")
    rows.sort(key=lambda r: (r["label"], r["timestamp"]))
    print(f"{'label':<20} {'executed':>9} {'total':>7} {'match %':>8}  timestamp")
    for row in rows:
        print(f"{row['label']:<20} {row['executed_cost']:>9} {row['total_cost']:>7} "
              f"{row['match_percent']:>8}  {row['timestamp']}")
    output = {"builds": rows}
    by_label = {}
    for row in rows:
        by_label[row["label"]] = row  # latest timestamp wins (rows are sorted)
    if "cold" in by_label and "warm" in by_label:
        cold, warm = by_label["cold"], by_label["warm"]
        output["comparison"] = {
            "cold_executed_cost": cold["executed_cost"],
            "warm_executed_cost": warm["executed_cost"],
            "saved_cost": cold["executed_cost"] - warm["executed_cost"],
        }
        print(f"cold executed {cold['executed_cost']} vs warm executed {warm['executed_cost']} "
              f"(saved {output['comparison']['saved_cost']})")
    print(json.dumps(output, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kilnci",
        description="Desk-scale CI for layered embedded-image builds.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    parser.add_argument("--report-dir", default=None, help="directory for build report files")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cache-serve", help="run the hashserv/downloads/sstate cache services")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--hashserv-port", type=int, default=8001)
    p.add_argument("--downloads-port", type=int, default=8002)
    p.add_argument("--sstate-port", type=int, default=8003)
    p.set_defaults(func=cmd_cache_serve)

    p = sub.add_parser("sync", help="materialize a pinned workspace from a source store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--workspace", required=True)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("build", help="build an image from a synced workspace")
    p.add_argument("--workspace", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--cache-host", default=None)
    p.add_argument("--local-state", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--report", default=None, help="write the build report to this file")
    p.add_argument("--label", default=None, help="label for stored reports (default: image name)")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("boot-test", help="boot an image artifact and assert the transcript")
    p.add_argument("--image", required=True, help="image artifact JSON (or emulator input file)")
    p.add_argument("--spec", default=None, help="boot test spec JSON")
    p.add_argument("--emulator-cmd", default=None,
                   help="external emulator command template containing {image}")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_boot_test)

    p = sub.add_parser("pipeline", help="pipeline operations")
    psub = p.add_subparsers(dest="pipeline_command", required=True)
    pr = psub.add_parser("run", help="apply a change event and run the triggered cascade")
    pr.add_argument("--workspace", required=True)
    pr.add_argument("--event", required=True, metavar="PROJECT[:fail]")
    pr.add_argument("--cache-host", default=None)
    pr.add_argument("--jobs", type=int, default=1)
    pr.set_defaults(func=cmd_pipeline_run)

    p = sub.add_parser("scenarios", help="scenario suite operations")
    ssub = p.add_subparsers(dest="scenarios_command", required=True)
    sr = ssub.add_parser("run", help="run the six-scenario validation suite")
    sr.add_argument("--workspace", required=True)
    sr.add_argument("--cache-host", default=None)
    sr.add_argument("--jobs", type=int, default=1)
    sr.add_argument("--out", required=True, help="verdict table output file")
    sr.set_defaults(func=cmd_scenarios_run)

    p = sub.add_parser("report", help="compare stored build reports")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BuildFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KilnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
