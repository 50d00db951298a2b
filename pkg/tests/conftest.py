import pytest
import torch

from dualmark.config import ExtractorConfig, StageConfig, toy_profile
from dualmark.data import random_crops
from dualmark.training import TrainingLog, run_stage

torch.set_num_threads(1)


def tiny_config(steps=(6, 50, 8)):
    """A configuration small enough to run all three stages in seconds."""
    cfg = toy_profile()
    cfg.copyright.width = 4
    cfg.copyright.fusion_channels = 8
    cfg.localized.num_blocks = 2
    cfg.localized.hidden = 8
    cfg.localized.predictor_blocks = 1
    cfg.localized.predictor_width = 8
    cfg.extractor = ExtractorConfig(pad_size=64, patch_size=8, window=4, depth=1, dim=32, heads=2, fpn_dim=8)
    cfg.attacks.surrogate_latent = 4
    t = cfg.training
    t.surrogate_steps = 3
    t.stage1 = StageConfig(stage=1, steps=steps[0], batch_size=2, lr=1e-3, optimizer="adamw", log_every=1, seed=1)
    t.stage2 = StageConfig(stage=2, steps=steps[1], batch_size=2, lr=1e-3, optimizer="adam", log_every=1, seed=2)
    t.stage3 = StageConfig(stage=3, steps=steps[2], batch_size=2, lr=1e-3, optimizer="adamw", log_every=1, seed=3)
    t.triplet_count = 6
    return cfg


CORPUS = random_crops(16, 64, seed=5)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """(config, workdir, per-stage logs) of a full tiny three-stage run."""
    work = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    logs = {}
    for stage in (1, 2, 3):
        logs[stage] = TrainingLog(work / f"log{stage}.jsonl")
        run_stage(cfg, stage, work, logs[stage], corpus=CORPUS)
    return cfg, work, logs


# --------------------------------------------------------------------------- acceptance report

ACCEPTANCE: list = []


@pytest.fixture
def criterion(request):
    """Call with (number, title, budget seconds); returns an elapsed-time clock. Outcomes are summarized."""
    import time

    state = {}

    def start(number: int, title: str, budget: float):
        state.update(number=number, title=title, budget=budget, t0=time.perf_counter())
        return lambda: time.perf_counter() - state["t0"]

    yield start
    if not state:
        return
    elapsed = time.perf_counter() - state["t0"]
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed and elapsed <= state["budget"]
    line = (f"criterion {state['number']}: {'PASS' if ok else 'FAIL'}  {state['title']}  "
            f"({elapsed:.1f}s, budget {state['budget']:.0f}s)")
    ACCEPTANCE.append((state["number"], line))
    print("\n" + line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
