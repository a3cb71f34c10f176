import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from repquant.repnet import fuse_model
from repquant.zoo import ArchSpec, build_repvgg, bundled_model, make_sample_sets

settings.register_profile("repquant", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repquant")

# acceptance results, filled by tests/test_acceptance.py and printed at the end of the run
ACCEPTANCE: dict = {}

SMALL_ARCH = ArchSpec(widths=(8, 8, 16), strides=(2, 1, 2), input_dims=(3, 16, 16), num_classes=4, probe_count=64)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0].rstrip("abcd")), k)):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {line}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bundled():
    m = bundled_model()
    return m, fuse_model(m), make_sample_sets(m, 0)


@pytest.fixture(scope="session")
def small():
    m = build_repvgg(3, SMALL_ARCH)
    return m, fuse_model(m), make_sample_sets(m, 3, calib_count=16, eval_count=32)


@pytest.fixture(scope="session")
def acceptance():
    """Record ``(passed, detail)`` under a criterion id for the end-of-run summary."""
    def record(key: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = (bool(ok), detail)
        return bool(ok)
    return record
