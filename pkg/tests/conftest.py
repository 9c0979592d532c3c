import pytest

from kilnci.cache import CacheEndpoints, serve
from kilnci.fixture import create_fixture_store, fixture_manifest
from kilnci.layers import load_layers
from kilnci.manifest import sync_workspace
from kilnci.taskgraph import build_task_graph

EPHEMERAL = dict(hashserv_port=0, downloads_port=0, sstate_port=0)


@pytest.fixture
def store(tmp_path):
    return create_fixture_store(tmp_path / "store")


@pytest.fixture
def workspace(tmp_path, store):
    return sync_workspace(fixture_manifest(), store, tmp_path / "ws")


@pytest.fixture
def layer_set(workspace):
    return load_layers(workspace)


@pytest.fixture
def graph(workspace, layer_set):
    return build_task_graph(layer_set.image("core-image-minimal"), layer_set, workspace)


@pytest.fixture
def cache_server(tmp_path):
    server = serve(CacheEndpoints(**EPHEMERAL), tmp_path / "cache-data")
    yield server
    server.stop()
