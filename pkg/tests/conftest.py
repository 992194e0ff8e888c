import pytest

_ACCEPTANCE = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and (rep.when == "call" or rep.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        title = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _ACCEPTANCE.append(f"{'PASS' if rep.passed else 'FAIL'}  {title}  [{detail}]")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
