import os

from threadpoolctl import threadpool_limits

# determinism checks assume single-threaded BLAS unless the caller overrides it
_limits = threadpool_limits(limits=int(os.environ.get("DEWARP_THREADS", "1")))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
