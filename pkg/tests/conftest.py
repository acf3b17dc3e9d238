import pytest

from brainalign.config import MlmTrainParams, RsmTrainParams, desk_profile
from brainalign.pipeline import run_pipeline


def tiny_config(seed=5):
    """Smallest config that still exercises every stage."""
    cfg = desk_profile(seed=seed)
    cfg.mlm = MlmTrainParams(epochs=2, batch_size=16, lr=1e-3, patience=10)
    cfg.rsm = RsmTrainParams(epochs=2, batch_size=16, lr=1e-4, warmup_steps=10, n_pairs=80)
    cfg.vision_max_epochs = 2
    return cfg


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One complete tiny pipeline shared by CLI/service tests."""
    workdir = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config()
    metrics = run_pipeline(cfg, workdir, n_exams=40)
    return {
        "workdir": workdir,
        "dataset": workdir / "dataset",
        "artifacts": workdir / "artifacts",
        "metrics": metrics,
        "config": cfg,
    }
