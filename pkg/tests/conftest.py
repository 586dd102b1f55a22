import numpy as np
import pytest

from blocksecret.model import derive_rng


@pytest.fixture
def rng(request):
    return derive_rng(7, request.node.name)


def random_structure_labels(rng, N, d):
    from blocksecret.model import sample_block_structure

    return sample_block_structure(N, d, rng)


def orthonormal_columns(rng, M, k):
    q, _ = np.linalg.qr(rng.standard_normal((M, k)))
    return q


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        if "criterion" in props:
            _ACCEPTANCE[props["criterion"]] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
