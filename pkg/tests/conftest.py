import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("pka", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pka")


@pytest.fixture
def rng():
    from pka.tensor import Rng
    return Rng(1234)


def naive_softmax(row):
    """Scalar-loop softmax, independent of the library code."""
    top = max(row)
    e = [np.exp(x - top) for x in row]
    s = sum(e)
    return [x / s for x in e]


# criterion -> list of (check, ok, detail, hard); filled by test_acceptance.py
ACCEPTANCE: dict[int, list] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[crit]
        hard = [c for c in checks if c[3]]
        verdict = "PASS" if all(c[1] for c in hard) else "FAIL"
        failed = [c[0] for c in hard if not c[1]]
        tr.write_line(f"{verdict} criterion {crit}" + (f"  (failed: {', '.join(failed)})" if failed else ""))
        for name, ok, detail, is_hard in checks:
            tag = ("ok  " if ok else "FAIL") if is_hard else "info"
            tr.write_line(f"    {tag} {name}: {detail}")
