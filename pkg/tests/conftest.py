import pytest

from fewshot_tsad.config import ExperimentConfig

TINY_SCENARIO = dict(
    n_train_noc=2, train_noc_length=90, train_pool_runs=4, train_fault_length=70, train_onset=30,
    n_test_noc=2, test_runs_per_fault=1, test_length=70, test_onset=30,
)


def tiny_config(**kw) -> ExperimentConfig:
    base = dict(
        dataset={"kind": "synthetic", "scenario": dict(TINY_SCENARIO)},
        epochs=2, batch_size=32, hidden=4, lr=3e-3, k_positives=2, seeds=[0],
    )
    base.update(kw)
    return ExperimentConfig.from_dict(base)


@pytest.fixture
def tiny():
    return tiny_config


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE.append((name, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
