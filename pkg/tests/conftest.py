import numpy as np
import pytest

from protomap.adpen import AdpenConfig, finetune_som, train_adpen
from protomap.cohort import SyntheticSpec, generate_cohort
from protomap.likelihood import CaeConfig, pretrain_cae, pseudo_values


SMALL_ADPEN = AdpenConfig(dims=(3, 4), epochs=60, finetune_epochs=20, seed=0)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SyntheticSpec(counts=(15, 15, 15, 15), seed=0))


@pytest.fixture(scope="session")
def small_adpen(small_cohort):
    """A briefly trained ADPEN on 60 samples with a 3x4 grid (read-only: copy before mutating)."""
    result = train_adpen(small_cohort, SMALL_ADPEN)
    finetune_som(result.model, small_cohort)
    return result


@pytest.fixture(scope="session")
def small_maps(small_adpen, small_cohort):
    mu = small_adpen.model.latents(small_cohort.clinical)
    return pseudo_values(mu, small_adpen.model.grid.prototypes)


@pytest.fixture(scope="session")
def small_cae(small_maps):
    cae, _ = pretrain_cae(small_maps, CaeConfig(code=8, epochs=40))
    return cae


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def verdict(criterion: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
