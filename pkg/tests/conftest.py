import torch

# accuracy/loss reproducibility is specified under single-threaded execution
torch.set_num_threads(1)

_VERDICTS: list[str] = []


def record_verdict(ok: bool, line: str) -> None:
    """Collect a criterion verdict; echoed live and in the terminal summary."""
    tagged = f"[{'PASS' if ok else 'FAIL'}] {line}"
    _VERDICTS.append(tagged)
    print(tagged, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _VERDICTS:
        terminalreporter.write_line(line)
