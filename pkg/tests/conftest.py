from _support import VERDICTS


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
