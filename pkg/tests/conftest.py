import logfire
import pytest

logfire.configure(send_to_logfire=False, console=False)


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    monkeypatch.delenv("DETGEOM_THREADS", raising=False)
    monkeypatch.delenv("DETGEOM_LOGFIRE_CONSOLE", raising=False)
