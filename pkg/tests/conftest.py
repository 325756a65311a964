import os
from pathlib import Path

import numpy as np
import pytest

from psnn.config import RunConfig
from psnn.dataset import generate_observations
from psnn.pipeline import Pipeline
from psnn.system import GS_DOMAIN, GS_OMEGA, gray_scott_oracle, gray_scott_solutions
from psnn.target import DeviationConfig, LabeledSolutionSet


THETA = np.array([0.1, 0.05])


@pytest.fixture
def gs_cfg():
    return DeviationConfig.for_domain(GS_DOMAIN)


@pytest.fixture
def gs_labeled(gs_cfg):
    sols, flags = gray_scott_oracle(THETA)
    return LabeledSolutionSet.build(THETA, sols, flags, gs_cfg)


@pytest.fixture(scope="session")
def small_obs():
    return generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, n_train=60, n_search=10, n_test=20, seed=3)


@pytest.fixture
def gs_solutions():
    return gray_scott_solutions(THETA)


ACCEPTANCE_DIR = Path(os.environ.get("PSNN_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / ".acceptance"))


@pytest.fixture(scope="session")
def pipeline():
    """Default-configuration pipeline on the shared cache; trains on first use."""
    p = Pipeline(RunConfig().resolve(ACCEPTANCE_DIR))
    p.ensure_data()
    return p


@pytest.fixture(scope="session")
def trained(pipeline):
    return pipeline.models("complete", 0)


@pytest.fixture(scope="session")
def trained_cut(pipeline):
    return pipeline.cut_value("complete", 0).cut


CRITERIA = {}


@pytest.fixture(scope="session")
def criteria():
    """Criterion id -> (passed, detail); printed at the end of the run."""
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA):
        passed, detail = CRITERIA[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if passed else 'FAIL'}  {detail}")
