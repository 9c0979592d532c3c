"""Exception hierarchy shared by all kilnci subsystems."""

from __future__ import annotations


class KilnError(Exception):
    """Base class for all kilnci errors."""


class ManifestError(KilnError):
    """Malformed or inconsistent coordination manifest."""


class SyncError(KilnError):
    """Workspace materialization failed (missing snapshot, collision, IO)."""


class RecipeError(KilnError):
    """Recipe or image file violates the line grammar or its invariants."""


class LayerError(KilnError):
    """Layer discovery or shadowing failed."""


class GraphError(KilnError):
    """Task graph construction or scheduling failed (cycles, dangling refs)."""


class CacheError(KilnError):
    """Cache store rejected a request."""


class CacheConflictError(CacheError):
    """Write-once violation: same key, different bytes."""


class CacheUnavailableError(CacheError):
    """Cache endpoint could not be reached; builds degrade to local-only."""


class TaskExecutionError(KilnError):
    """A task failed while running."""

    def __init__(self, task_id: str, reason: str):
        super().__init__(f"task {task_id} failed: {reason}")
        self.task_id = task_id
        self.reason = reason


class BuildFailure(KilnError):
    """A build aborted on a failing task; carries the partial report."""

    def __init__(self, task_id: str, report):
        super().__init__(f"build failed at task {task_id}")
        self.task_id = task_id
        self.report = report


class PipelineError(KilnError):
    """Pipeline configuration or orchestration error."""


class BootError(KilnError):
    """Boot simulation or external emulator error."""


class BootTimeoutError(BootError):
    """External boot did not reach the login prompt in time."""

    def __init__(self, message: str, transcript):
        super().__init__(message)
        self.transcript = transcript
