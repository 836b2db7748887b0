import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record a numbered acceptance result; the detail string is shown in the summary."""

    class Recorder:
        def __call__(self, number: int, body):
            try:
                detail = body()
            except BaseException as e:
                ACCEPTANCE[number] = (False, f"{type(e).__name__}: {' '.join(str(e).split())[:160]}")
                raise
            ACCEPTANCE[number] = (True, detail or "")

    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
