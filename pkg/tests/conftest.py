from __future__ import annotations

import pytest

from ctirules import _kernels_py
from ctirules.attack_kb import build_technique_index, load_sample_catalog
from ctirules.gateway import BackendConfig, Gateway, ScriptedResponder, hash_embed

try:
    from ctirules import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

KERNEL_BACKENDS = [pytest.param(_kernels_py, id="python")]
if _kernels_c is not None:
    KERNEL_BACKENDS.append(pytest.param(_kernels_c, id="cython"))


@pytest.fixture(params=KERNEL_BACKENDS)
def kernel_impl(request):
    return request.param


@pytest.fixture(scope="session")
def catalog():
    return load_sample_catalog()


@pytest.fixture(scope="session")
def store(catalog):
    return build_technique_index(catalog, hash_embed, "hash-bow-256")


def scripted_gateway(script, default=None, **config_kw) -> Gateway:
    return Gateway(BackendConfig(**config_kw), responder=ScriptedResponder(script, default))


@pytest.fixture
def scripted():
    return scripted_gateway


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
