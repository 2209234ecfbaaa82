import io
import random
import sys

import pytest

from authstore.group import TEST_256, TOY
from authstore.server import AuthServer, ServerConfig
from authstore.stretch import DEFAULT_CACHE, KdfParams


class StubRng:
    """Hands out a fixed sequence of scalars."""

    def __init__(self, *values):
        self.values = list(values)

    def randrange(self, lo, hi):
        v = self.values.pop(0)
        assert lo <= v < hi
        return v


@pytest.fixture
def toy():
    return TOY


@pytest.fixture
def group():
    return TEST_256


@pytest.fixture
def kdf():
    return KdfParams.test_iterated(time_cost=10)


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture(autouse=True)
def _fresh_cache():
    DEFAULT_CACHE.clear()
    yield
    DEFAULT_CACHE.clear()


@pytest.fixture
def server_factory(tmp_path):
    servers = []

    def make(**overrides):
        cfg = dict(
            data_dir=tmp_path / f"srv{len(servers)}",
            port=0,
            group=TEST_256.name,
            provider_id="test-provider",
            decoy_kdf=KdfParams.test_iterated(10, bytes(16)),
        )
        extra = {k: overrides.pop(k) for k in ("clock", "admin_stream", "session_observer") if k in overrides}
        cfg.update(overrides)
        extra.setdefault("admin_stream", io.StringIO())
        srv = AuthServer(ServerConfig(**cfg), **extra)
        srv.start()
        servers.append(srv)
        return srv

    yield make
    for srv in servers:
        srv.close()


@pytest.fixture
def server(server_factory):
    return server_factory()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(acceptance.RESULTS):
            terminalreporter.write_line(acceptance.RESULTS[number])
