"""kilnci: a desk-scale CI stack for layered embedded-image builds.

Subsystems:

* :mod:`kilnci.manifest`  — pinned multi-repo workspace sync and fingerprints
* :mod:`kilnci.layers`    — layers, recipes, image recipes, package closure
* :mod:`kilnci.taskgraph` — per-recipe task chains and content-derived hashes
* :mod:`kilnci.cache`     — hash equivalence + downloads + sstate services
* :mod:`kilnci.executor`  — incremental execution, sstate accounting, artifacts
* :mod:`kilnci.pipeline`  — dependency-triggered pipeline cascades
* :mod:`kilnci.boottest`  — simulated boot transcripts and assertions
* :mod:`kilnci.cli`       — the ``kilnci`` command
"""

__version__ = "0.1.0"
