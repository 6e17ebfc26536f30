import time

import numpy as np
import pytest

from pcp.priors import ConceptGroups, PriorTable
from pcp.synthgen import default_spec, generate
from pcp.trainer import TrainConfig, run_seeds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_table():
    probs = np.array([[0.9, 0.2], [0.1, 0.8], [0.6, 0.3]])
    return PriorTable(["a", "b", "c"], ["pos", "neg"], probs)


@pytest.fixture
def small_groups():
    return ConceptGroups.from_groups([[0, 1]], 3)


@pytest.fixture(scope="session")
def default_task():
    spec = default_spec()
    return spec, generate(spec, 0)


ABLATION = ((False, False), (False, True), (True, False), (True, True))


@pytest.fixture(scope="session")
def ablation_runs(default_task):
    """Full-recipe 3-seed runs of all four (KL, entropy) configurations.

    Shared by the training and acceptance tests; takes a few minutes.
    """
    spec, ds = default_task
    out = {}
    for use_kl, use_ent in ABLATION:
        cfg = TrainConfig(disable_kl=not use_kl, disable_ent=not use_ent, seeds=(0, 1, 2))
        start = time.perf_counter()
        result = run_seeds(cfg, ds, spec.priors, spec.groups)
        result["elapsed_s"] = time.perf_counter() - start
        out[(use_kl, use_ent)] = result
    return out
