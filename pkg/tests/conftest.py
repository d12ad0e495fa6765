import torch

ACCEPTANCE_LINES: list[str] = []

torch.set_num_threads(max(1, torch.get_num_threads()))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
