import sys

import pytest

from kilnci.boottest import (
    LOGIN_PROMPT,
    BootTestSpec,
    BootTranscript,
    compose_boot,
    default_boot_spec,
    evaluate_spec,
    run_boot_test,
    run_external_boot,
)
from kilnci.errors import BootError, BootTimeoutError
from kilnci.executor import LocalState, execute_build


@pytest.fixture
def artifact(tmp_path, graph):
    _, artifact = execute_build(graph, None, LocalState(tmp_path / "boot-state"), jobs=1)
    return artifact


class TestComposeBoot:
    def test_fixture_image_boots_with_module_then_login_then_command(self, artifact):
        t = compose_boot(artifact)
        module_index = t.lines.index("[boot] hello-mod: Hello from hello-mod")
        login_index = t.lines.index(LOGIN_PROMPT)
        command_index = t.lines.index("helloworld: Hello World from libhelloworld")
        assert module_index < login_index < command_index
        assert t.reached_login
        assert t.outputs_map()["helloworld"] == ("Hello World from libhelloworld", True)

    def test_image_without_module_still_reaches_login(self, artifact):
        t = compose_boot(artifact.without_package("hello-mod"))
        assert t.reached_login
        assert not any("hello-mod" in line for line in t.lines)

    def test_missing_runtime_library_fails_the_command(self, artifact):
        t = compose_boot(artifact.without_package("libhelloworld"))
        assert "helloworld: error while loading shared library libhelloworld" in t.lines
        message, ok = t.outputs_map()["helloworld"]
        assert not ok

    def test_transcript_is_deterministic(self, artifact):
        assert compose_boot(artifact) == compose_boot(artifact)

    def test_ordering_invariants(self, artifact):
        t = compose_boot(artifact)
        login_index = t.login_index()
        for module in artifact.autoload_modules:
            assert t.lines.index(f"[boot] {module}: Hello from {module}") < login_index
        for command, _ in t.test_outputs:
            line = next(l for l in t.lines if l.startswith(f"{command}: "))
            assert t.lines.index(line) > login_index

    def test_removing_any_rdepends_target_flips_its_dependent(self, artifact):
        rdepends = artifact.rdepends_map()
        targets = {dep for deps in rdepends.values() for dep in deps}
        assert targets  # fixture has at least helloworld -> libhelloworld
        for target in sorted(targets):
            dependents = [name for name, deps in rdepends.items() if target in deps]
            before = compose_boot(artifact).outputs_map()
            after = compose_boot(artifact.without_package(target)).outputs_map()
            for dependent in dependents:
                assert before[dependent][1] is True
                assert after[dependent][1] is False


class TestRunBootTest:
    def test_default_spec_passes_on_fixture_image(self, artifact):
        result = run_boot_test(artifact, default_boot_spec())
        assert result.passed
        assert all(ok for _, ok, _ in result.checks)

    def test_absent_module_fails_named_assertion(self, artifact):
        spec = BootTestSpec(expected_module_lines=(("ghost-mod", "Hello from ghost-mod"),))
        result = run_boot_test(artifact, spec)
        assert not result.passed
        failing = [name for name, ok, _ in result.checks if not ok]
        assert failing == ["module ghost-mod"]

    def test_login_only_spec_passes_for_any_image(self, artifact):
        spec = BootTestSpec(require_login=True)
        assert run_boot_test(artifact.without_package("helloworld"), spec).passed

    def test_wrong_command_output_reported(self, artifact):
        spec = BootTestSpec(expected_commands=(("helloworld", "something else"),))
        result = run_boot_test(artifact, spec)
        assert not result.passed
        detail = dict((name, d) for name, ok, d in result.checks)["command helloworld"]
        assert "expected" in detail

    def test_spec_json_round_trip(self):
        spec = default_boot_spec()
        assert BootTestSpec.from_json_obj(spec.to_json_obj()) == spec


class TestExternalBoot:
    def test_stub_that_prints_the_prompt(self, tmp_path):
        stub = tmp_path / "stub.py"
        stub.write_text(f"print({LOGIN_PROMPT!r})\n")
        transcript = run_external_boot(
            tmp_path / "img.json", f"{sys.executable} {stub} {{image}}", timeout=5,
        )
        assert transcript.reached_login

    def test_command_output_after_prompt_is_parsed(self, tmp_path):
        script = tmp_path / "emu.py"
        script.write_text(
            "print('boot noise')\n"
            f"print({LOGIN_PROMPT!r})\n"
            "print('helloworld: Hello World from libhelloworld')\n"
        )
        transcript = run_external_boot(
            tmp_path / "img.json", f"{sys.executable} {script} --image {{image}}", timeout=5,
        )
        assert transcript.reached_login
        assert transcript.outputs_map()["helloworld"] == ("Hello World from libhelloworld", True)
        result = evaluate_spec(transcript, default_boot_spec())
        # the stub prints no module line, so exactly that check fails
        assert [name for name, ok, _ in result.checks if not ok] == ["module hello-mod"]

    def test_timeout_when_prompt_never_appears(self, tmp_path):
        with pytest.raises(BootTimeoutError) as info:
            run_external_boot(tmp_path / "img.json",
                              f"{sys.executable} -c 'import time; time.sleep(30)' {{image}}",
                              timeout=0.3)
        assert info.value.transcript.reached_login is False

    def test_template_requires_placeholder(self, tmp_path):
        with pytest.raises(BootError, match="placeholder"):
            run_external_boot(tmp_path / "img.json", "echo hi", timeout=1)

    def test_spawn_failure(self, tmp_path):
        with pytest.raises(BootError, match="spawn"):
            run_external_boot(tmp_path / "img.json", "/nonexistent/emulator {image}", timeout=1)


class TestTranscriptParsing:
    def test_from_lines_identifies_login_and_outputs(self):
        t = BootTranscript.from_lines([
            "noise", LOGIN_PROMPT, "cmd: output here", "other: error while loading shared library libx",
        ])
        assert t.reached_login
        assert t.outputs_map() == {
            "cmd": ("output here", True),
            "other": ("error while loading shared library libx", False),
        }

    def test_without_login_no_outputs_collected(self):
        t = BootTranscript.from_lines(["cmd: output"])
        assert not t.reached_login
        assert t.outputs_map() == {}
