"""Simulated boot of a composed image, with transcript assertions.

The simulation is a pure function of the image artifact: autoloaded kernel
modules announce themselves before the login prompt, and every command
package runs after it, succeeding only when its runtime dependency closure
is actually installed.  An external-emulator hook captures real console
output into the same transcript shape so the same assertions apply.
"""

from __future__ import annotations

import re
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass

from .errors import BootError, BootTimeoutError
from .executor import ImageArtifact

LOGIN_PROMPT = "qemuarm64 login:"

_COMMAND_LINE_RE = re.compile(r"([A-Za-z0-9][A-Za-z0-9._-]*): (.*)")
_MISSING_LIB_PREFIX = "error while loading shared library"


@dataclass(frozen=True)
class BootTranscript:
    lines: tuple[str, ...]
    reached_login: bool
    # command name -> (output text, passed)
    test_outputs: tuple[tuple[str, tuple[str, bool]], ...]

    @classmethod
    def from_lines(cls, lines: list[str]) -> "BootTranscript":
        reached_login = LOGIN_PROMPT in lines
        outputs: dict[str, tuple[str, bool]] = {}
        if reached_login:
            after_login = lines[lines.index(LOGIN_PROMPT) + 1:]
            for line in after_login:
                match = _COMMAND_LINE_RE.fullmatch(line)
                if match:
                    name, message = match.group(1), match.group(2)
                    outputs[name] = (message, not message.startswith(_MISSING_LIB_PREFIX))
        return cls(
            lines=tuple(lines),
            reached_login=reached_login,
            test_outputs=tuple(sorted(outputs.items())),
        )

    def outputs_map(self) -> dict[str, tuple[str, bool]]:
        return dict(self.test_outputs)

    def login_index(self) -> int | None:
        return self.lines.index(LOGIN_PROMPT) if self.reached_login else None


@dataclass(frozen=True)
class BootTestSpec:
    expected_module_lines: tuple[tuple[str, str], ...] = ()  # (module, message substring)
    expected_commands: tuple[tuple[str, str], ...] = ()      # (command, expected output)
    require_login: bool = True

    def to_json_obj(self) -> dict:
        return {
            "expected_module_lines": [list(p) for p in self.expected_module_lines],
            "expected_commands": [list(p) for p in self.expected_commands],
            "require_login": self.require_login,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "BootTestSpec":
        return cls(
            expected_module_lines=tuple(tuple(p) for p in obj.get("expected_module_lines", [])),
            expected_commands=tuple(tuple(p) for p in obj.get("expected_commands", [])),
            require_login=obj.get("require_login", True),
        )


def default_boot_spec() -> BootTestSpec:
    """The stock verification set: module log line, linked hello output, login."""
    return BootTestSpec(
        expected_module_lines=(("hello-mod", "Hello from hello-mod"),),
        expected_commands=(("helloworld", "Hello World from libhelloworld"),),
        require_login=True,
    )


@dataclass(frozen=True)
class BootTestResult:
    passed: bool
    checks: tuple[tuple[str, bool, str], ...]  # (name, passed, detail)

    def to_json_obj(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [list(c) for c in self.checks],
        }

    def summary_text(self) -> str:
        lines = [
            f"{'PASS' if ok else 'FAIL'}  {name}: {detail}" for name, ok, detail in self.checks
        ]
        lines.append(f"boot test {'passed' if self.passed else 'failed'}")
        return "\n".join(lines)


def _module_line(module: str) -> str:
    return f"[boot] {module}: Hello from {module}"


def _rdepends_closure(name: str, rdepends: dict[str, tuple[str, ...]]) -> set[str]:
    closure: set[str] = set()
    stack = list(rdepends.get(name, ()))
    while stack:
        dep = stack.pop()
        if dep in closure:
            continue
        closure.add(dep)
        stack.extend(rdepends.get(dep, ()))
    return closure


def compose_boot(img: ImageArtifact) -> BootTranscript:
    """Deterministic console transcript for an image.

    Convention: packages named ``lib*`` are libraries, autoload modules are
    kernel modules, and every remaining package installs a command named
    after itself that prints via its library dependencies.
    """
    img.validate()
    lines = [f"[boot] kernel: starting {img.image_name}"]
    for module in img.autoload_modules:
        lines.append(_module_line(module))
    lines.append("[boot] init: mounting filesystems")
    lines.append("[boot] init: starting services")
    lines.append(LOGIN_PROMPT)

    present = img.package_names()
    rdepends = img.rdepends_map()
    commands = sorted(
        name for name in present
        if not name.startswith("lib") and name not in img.autoload_modules
    )
    for command in commands:
        closure = _rdepends_closure(command, rdepends)
        missing = sorted(closure - present)
        if missing:
            lines.append(f"{command}: {_MISSING_LIB_PREFIX} {missing[0]}")
        else:
            libs = sorted(dep for dep in closure if dep.startswith("lib"))
            message = "Hello World from " + ", ".join(libs) if libs else "Hello World"
            lines.append(f"{command}: {message}")
    return BootTranscript.from_lines(lines)


def evaluate_spec(transcript: BootTranscript, spec: BootTestSpec) -> BootTestResult:
    checks: list[tuple[str, bool, str]] = []
    login_index = transcript.login_index()

    if spec.require_login:
        checks.append((
            "login",
            transcript.reached_login,
            f"prompt {LOGIN_PROMPT!r} " + ("reached" if transcript.reached_login else "missing"),
        ))

    for module, substring in spec.expected_module_lines:
        prefix = f"[boot] {module}: "
        index = next(
            (i for i, line in enumerate(transcript.lines)
             if line.startswith(prefix) and substring in line),
            None,
        )
        if index is None:
            checks.append((f"module {module}", False, f"no boot line containing {substring!r}"))
        elif login_index is not None and index >= login_index:
            checks.append((f"module {module}", False, "module line appears after login prompt"))
        else:
            checks.append((f"module {module}", True, transcript.lines[index]))

    outputs = transcript.outputs_map()
    for command, expected in spec.expected_commands:
        if command not in outputs:
            checks.append((f"command {command}", False, "no output captured"))
            continue
        message, ok = outputs[command]
        if not ok:
            checks.append((f"command {command}", False, message))
        elif message != expected:
            checks.append((f"command {command}", False,
                           f"expected {expected!r}, got {message!r}"))
        else:
            checks.append((f"command {command}", True, message))

    return BootTestResult(passed=all(ok for _, ok, _ in checks), checks=tuple(checks))


def run_boot_test(img: ImageArtifact, spec: BootTestSpec) -> BootTestResult:
    return evaluate_spec(compose_boot(img), spec)


def run_external_boot(image_file, command_template: str, timeout: float) -> BootTranscript:
    """Drive a real emulator command and capture its console into a transcript.

    Capture stops at login-prompt detection (after a short drain for trailing
    output), process exit, or timeout; a timeout raises
    :class:`BootTimeoutError` with the partial transcript attached.
    """
    if "{image}" not in command_template:
        raise BootError("emulator command template must contain the {image} placeholder")
    argv = shlex.split(command_template.replace("{image}", str(image_file)))
    try:
        proc = subprocess.Popen(
            argv, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True
        )
    except OSError as exc:
        raise BootError(f"cannot spawn emulator {argv[0]!r}: {exc}") from exc

    lines: list[str] = []
    login_seen = threading.Event()
    done = threading.Event()

    def reader():
        assert proc.stdout is not None
        for raw in proc.stdout:
            lines.append(raw.rstrip("\n"))
            if lines[-1] == LOGIN_PROMPT:
                login_seen.set()
        done.set()

    thread = threading.Thread(target=reader, daemon=True)
    thread.start()

    deadline = time.monotonic() + timeout
    while not (login_seen.is_set() or done.is_set()):
        if time.monotonic() >= deadline:
            proc.kill()
            proc.wait()
            thread.join(timeout=1)
            raise BootTimeoutError(
                f"no login prompt within {timeout} seconds",
                BootTranscript.from_lines(lines),
            )
        time.sleep(0.01)
    if not done.is_set():
        done.wait(0.2)  # drain trailing output after the prompt
        proc.kill()
    proc.wait()
    thread.join(timeout=1)
    return BootTranscript.from_lines(lines)
