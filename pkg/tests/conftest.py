import hypothesis
import numpy as np
import pytest

from cvdcm.dataset import Alternative, ChoiceTask, Dataset

hypothesis.settings.register_profile("ci", deadline=None, max_examples=50)
hypothesis.settings.load_profile("ci")

HHC_LEVELS = (-225, -150, -75, 0, 75, 150, 225)
TTI_LEVELS = (-15, -10, -5, 0, 5, 10, 15)


def random_dataset(rng, n, with_images=False, n_images=None):
    n_images = n_images or max(4, n)
    tasks = []
    for i in range(n):
        alts = []
        ims = rng.choice(n_images, size=2, replace=False)
        for j in range(2):
            alts.append(
                Alternative(
                    hhc=int(rng.choice(HHC_LEVELS)),
                    tti=int(rng.choice(TTI_LEVELS)),
                    image_id=f"img{ims[j]}" if with_images else None,
                    month=int(rng.integers(1, 13)),
                )
            )
        tasks.append(ChoiceTask(f"r{i // 15}", f"t{i}", tuple(alts), int(rng.integers(0, 2))))
    return Dataset(tasks)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
