import pytest

ACCEPTANCE_RESULTS = []


@pytest.fixture
def report():
    """Record an acceptance criterion outcome for the end-of-run summary."""

    def record(number, title, passed, detail=""):
        ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")


@pytest.fixture(scope="session")
def conjugate_fit():
    """Gaussian-mean model fitted to 200 rows; returns (state, data, seconds)."""
    import time

    from platedvi import builtin
    from platedvi.inference import SVIConfig, fit

    rows = builtin.synth_gaussian(200, 1)
    p, q = builtin.build("gaussian_mean", {}, 0)
    data = builtin.observations("gaussian_mean", rows)
    t0 = time.perf_counter()
    state = fit(p, q, data, SVIConfig(epochs=1000, batch_size=50, learning_rate=0.01, seed=0))
    return state, data, time.perf_counter() - t0
