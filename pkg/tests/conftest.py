import pytest

from fabricrpc.config import Settings
from fabricrpc.fabric.system import SystemContext
from fabricrpc.verbs import Cluster

# Small enough to keep every system cheap to build.
TEST_DEFAULTS = dict(
    recv_buffers=64,
    recv_buffer_size=8192,
    slab_size=1 << 20,
    finalize_timeout=15.0,
    seed=7,
)


@pytest.fixture
def cluster():
    cluster = Cluster(seed=1)
    cluster.add_machine()
    cluster.add_machine()
    yield cluster
    cluster.close()


@pytest.fixture
def make_system():
    """Build a system from Settings overrides; every system is shut down at teardown."""
    built = []

    def _make(**overrides) -> SystemContext:
        settings = Settings.build(**{**TEST_DEFAULTS, **overrides})
        system = SystemContext(settings)
        built.append(system)
        return system

    yield _make
    for system in built:
        system.shutdown()


@pytest.fixture
def system(make_system):
    """Two machines, one process each, two threads per process."""
    return make_system(machines=2, processes_per_machine=1, threads_per_process=2)
