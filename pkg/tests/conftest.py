import pytest

from smtaformer.pipeline import load_dataset, preprocess
from smtaformer.synth import SynthConfig, generate, write_cohort


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """A 150-stay synthetic cohort, raw and preprocessed: (raw_dir, data_dir)."""
    root = tmp_path_factory.mktemp("small_cohort")
    write_cohort(*generate(SynthConfig(n_records=150, signal=0.9, seed=3)), root / "raw")
    preprocess(root / "raw" / "stays.jsonl", root / "data", seed=3)
    return root / "raw", root / "data"


@pytest.fixture(scope="session")
def small_dataset(small_cohort):
    return load_dataset(small_cohort[1])


# ---------------------------------------------------------------------------
# acceptance criteria: one pass/fail line each, printed in the terminal summary
# ---------------------------------------------------------------------------

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Call ``criterion(name, ok, detail)`` once per acceptance criterion; the test then asserts ``ok``."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
