import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from symtrack.config import ModelConfig, RunConfig

# acceptance lines collected by tests/test_acceptance.py, echoed after the run
ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    return ModelConfig.micro()


@pytest.fixture(scope="session")
def small_run():
    """A toy run small enough to train in seconds."""
    from dataclasses import replace

    cfg = RunConfig(model=replace(ModelConfig.micro(), template_size=16, search_size=32, patch=8))
    return replace(cfg, data=replace(cfg.data, length=12, image_size=64, radius_min=4, radius_max=6,
                                     comp_window=3, comp_fraction=0.25),
                   train=replace(cfg.train, batch_size=4, n_sequences=4),
                   eval=replace(cfg.eval, n_sequences=3, image_px=64))


@pytest.fixture(scope="session")
def small_pretrained(small_run):
    from symtrack.trainer import pretrain

    return pretrain(small_run, steps=5)


# ---------------------------------------------------------------- paired training study
# One pretrained tracker shared by every seed; per seed a full run (adapters, masking,
# distillation) and an ablated run (adapters only) see the same batches and masks.

STUDY_PRETRAIN_STEPS = 400
STUDY_ADAPT_STEPS = 300
STUDY_SEEDS = (0, 1, 2, 3, 4)
STUDY_CONDITIONS = ("drop_rgb", "drop_x")
STUDY_SECONDS: dict = {}


@pytest.fixture(scope="session")
def study_pretrained():
    import time

    from symtrack.trainer import pretrain

    t0 = time.perf_counter()
    ck = pretrain(RunConfig(), steps=STUDY_PRETRAIN_STEPS)
    STUDY_SECONDS["pretrain"] = time.perf_counter() - t0
    return ck


@pytest.fixture(scope="session")
def paired_study(study_pretrained):
    import time

    from symtrack.checkpoint import model_from_checkpoint
    from symtrack.evaluate import held_out_sequences, robustness_suite
    from symtrack.trainer import JsonlLog, ablated, adapt

    t0 = time.perf_counter()
    runs = []
    for seed in STUDY_SEEDS:
        cfg = RunConfig(seed=seed)
        conds = [p for p in cfg.eval.conditions if p.label in STUDY_CONDITIONS]
        seqs = held_out_sequences(cfg)
        row = {"seed": seed}
        for name, run_cfg in (("full", cfg), ("ablated", ablated(cfg))):
            log = JsonlLog()
            ck = adapt(study_pretrained, run_cfg, steps=STUDY_ADAPT_STEPS, logger=log)
            table = robustness_suite(model_from_checkpoint(ck), seqs, conds, seed, cfg.eval.image_px)
            row[name] = {k: v.metrics.success_auc for k, v in table.items()}
            row[name + "_per_seq"] = {k: v.per_sequence_auc for k, v in table.items()}
            row[name + "_loss"] = [r["l_track"] for r in log.records]
        runs.append(row)
    STUDY_SECONDS["adapt_eval"] = time.perf_counter() - t0
    return runs
