import numpy as np
import pytest

from mergerisk.config import ExperimentConfig
from mergerisk.pipeline import Pipeline


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full default-config pipeline run shared by every test that needs it."""
    out = tmp_path_factory.mktemp("desk")
    pipe = Pipeline(ExperimentConfig(), out_dir=out, log=lambda *_: None)
    pipe.run_all()
    return pipe


@pytest.fixture(scope="session")
def desk_models(desk_run):
    """Convenience bundle: net, tasks, checkpoints and merged models."""
    pipe = desk_run
    theta0 = pipe.load_theta("theta0")
    finetuned = [pipe.load_theta(f"theta{t.task_id + 1}") for t in pipe.tasks]
    merged = {tag: pipe.load_merged(tag)
              for tag in ("wa", "ta", "tm", "am", "wa_rs", "ta_rs", "tm_rs", "am_rs")}
    return {"pipe": pipe, "net": pipe.net, "tasks": pipe.tasks,
            "theta0": theta0, "finetuned": finetuned, "merged": merged}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
