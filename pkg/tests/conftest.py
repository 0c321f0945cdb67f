import pytest

from polyadapt.config import Plan, plan_from_json

TINY_PLAN = {
    "dataset": {"n_train_scenes": 64, "n_eval_scenes": 32, "train_langs": 2, "holdout_langs": 1},
    "teacher": {"steps": 3, "batch": 8},
    "scorer": {"steps": 3, "batch": 8},
    "alignment": {"steps": 3, "batch": 8},
    "diffusion": {"steps": 3, "batch": 4, "T": 25},
    "adapter": {"steps": 3, "batch": 4, "probe_every": 2},
    "sampler": {"chunk": 4},
    "eval": {"n_scenes": 4, "n_retrieval": 8},
}


@pytest.fixture
def tiny_plan() -> Plan:
    return plan_from_json(TINY_PLAN)
