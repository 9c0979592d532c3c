"""Built-in demo corpus: five projects at revision ``kirkstone``.

Three components (a shared library, an app linked against it, and an
autoloaded kernel module), one layer project carrying their recipes and the
image description, and one coordination project holding the manifest.  Run
``python -m kilnci.fixture STORE_DIR`` to materialize it as a source store.
"""

from __future__ import annotations

import json
from pathlib import Path

from .manifest import Manifest, ProjectEntry, RemoteSpec, SourceStore, serialize_manifest

FIXTURE_REVISION = "kirkstone"
FIXTURE_IMAGE = "core-image-minimal"
FIXTURE_COMPONENTS = ("libhelloworld", "helloworld", "hello-mod")

_LIBHELLOWORLD_H = """\
#ifndef LIBHELLOWORLD_H
#define LIBHELLOWORLD_H

const char *hello_message(void);

#endif
"""

_LIBHELLOWORLD_C = """\
#include "libhelloworld.h"

const char *hello_message(void)
{
    return "Hello World from libhelloworld";
}
"""

_HELLOWORLD_C = """\
#include <stdio.h>
#include <libhelloworld.h>

int main(void)
{
    puts(hello_message());
    return 0;
}
"""

_HELLO_MOD_C = """\
#include <linux/module.h>
#include <linux/init.h>

static int __init hello_mod_init(void)
{
    pr_info("Hello from hello-mod\\n");
    return 0;
}

static void __exit hello_mod_exit(void)
{
    pr_info("Goodbye from hello-mod\\n");
}

module_init(hello_mod_init);
module_exit(hello_mod_exit);
MODULE_LICENSE("GPL");
"""

_LAYER_CONF = """\
LAYER_NAME = meta-custom
LAYER_PRIORITY = 10
"""

_LIBHELLOWORLD_RECIPE = """\
# Shared library providing the hello message.
NAME = libhelloworld
VERSION = 1.0
SRC = project://libhelloworld
COST_COMPILE = 12
"""

_HELLOWORLD_RECIPE = """\
# Application linked against libhelloworld at build and run time.
NAME = helloworld
VERSION = 1.0
SRC = project://helloworld
DEPENDS = libhelloworld
RDEPENDS = libhelloworld
COST_COMPILE = 10
"""

_HELLO_MOD_RECIPE = """\
# Kernel module announced in the log during boot.
NAME = hello-mod
VERSION = 1.0
SRC = project://hello-mod
KERNEL_MODULE = true
AUTOLOAD = true
COST_COMPILE = 15
"""

_IMAGE_FILE = f"""\
IMAGE_NAME = {FIXTURE_IMAGE}
INSTALL = helloworld libhelloworld hello-mod
"""


def _component_pipeline(project: str) -> str:
    return json.dumps({
        "project": project,
        "stages": ["build"],
        "jobs": [{"name": f"build-{project}", "stage": "build", "action": "component-build"}],
        "triggers": ["meta-custom"],
    }, indent=2) + "\n"


_META_CUSTOM_PIPELINE = json.dumps({
    "project": "meta-custom",
    "stages": ["build"],
    "jobs": [{"name": "build-layer", "stage": "build", "action": "component-build"}],
    "triggers": ["manifest"],
}, indent=2) + "\n"

_MANIFEST_PIPELINE = json.dumps({
    "project": "manifest",
    "stages": ["build", "test"],
    "jobs": [
        {"name": "image-build", "stage": "build", "action": "image-build"},
        {"name": "boot-test", "stage": "test", "action": "boot-test"},
    ],
    "triggers": [],
}, indent=2) + "\n"


def fixture_manifest() -> Manifest:
    return Manifest(
        remotes=(RemoteSpec("origin", "file:///srv/sources"),),
        default_revision=FIXTURE_REVISION,
        default_remote="origin",
        projects=(
            ProjectEntry("hello-mod", "sources/hello-mod", FIXTURE_REVISION, "origin"),
            ProjectEntry("helloworld", "sources/helloworld", FIXTURE_REVISION, "origin"),
            ProjectEntry("libhelloworld", "sources/libhelloworld", FIXTURE_REVISION, "origin"),
            ProjectEntry("manifest", "manifest", FIXTURE_REVISION, "origin"),
            ProjectEntry("meta-custom", "layers/meta-custom", FIXTURE_REVISION, "origin"),
        ),
    )


def fixture_trees() -> dict[str, dict[str, str]]:
    """Project name -> {relative path -> file content}."""
    return {
        "libhelloworld": {
            "include/libhelloworld.h": _LIBHELLOWORLD_H,
            "src/libhelloworld.c": _LIBHELLOWORLD_C,
            "pipeline.json": _component_pipeline("libhelloworld"),
        },
        "helloworld": {
            "src/helloworld.c": _HELLOWORLD_C,
            "pipeline.json": _component_pipeline("helloworld"),
        },
        "hello-mod": {
            "src/hello_mod.c": _HELLO_MOD_C,
            "pipeline.json": _component_pipeline("hello-mod"),
        },
        "meta-custom": {
            "conf/layer.conf": _LAYER_CONF,
            "recipes/libhelloworld/libhelloworld_1.0.recipe": _LIBHELLOWORLD_RECIPE,
            "recipes/helloworld/helloworld_1.0.recipe": _HELLOWORLD_RECIPE,
            "recipes/hello-mod/hello-mod_1.0.recipe": _HELLO_MOD_RECIPE,
            "images/core-image-minimal.image": _IMAGE_FILE,
            "pipeline.json": _META_CUSTOM_PIPELINE,
        },
        "manifest": {
            "manifest.xml": serialize_manifest(fixture_manifest()),
            "pipeline.json": _MANIFEST_PIPELINE,
        },
    }


def create_fixture_store(store_root: Path | str) -> SourceStore:
    """Populate a source store with all five fixture projects."""
    store = SourceStore(store_root)
    for name, files in fixture_trees().items():
        store.add_snapshot(name, FIXTURE_REVISION, files)
    return store


def fixture_manifest_path(store: SourceStore) -> Path:
    return store.snapshot_dir("manifest", FIXTURE_REVISION) / "manifest.xml"


if __name__ == "__main__":
    import sys

    if len(sys.argv) != 2:
        print("usage: python -m kilnci.fixture STORE_DIR", file=sys.stderr)
        raise SystemExit(2)
    store = create_fixture_store(sys.argv[1])
    print(f"fixture store created under {store.root}")
    print(f"manifest: {fixture_manifest_path(store)}")
