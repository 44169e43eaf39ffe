import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.register_profile("thorough", max_examples=1000, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_a" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        criterion = name.split("_")[1].upper()
        detail = dict(report.user_properties).get("detail", "")
        if not detail and report.longrepr is not None:
            detail = str(report.longrepr).strip().splitlines()[-1]
        _acceptance[criterion] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_acceptance, key=lambda c: int(c[1:])):
        status, detail = _acceptance[criterion]
        terminalreporter.write_line(f"{criterion} {status}  {detail}")
