from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fusvdd.config import load_config
from fusvdd.data import ModalitySpec, SynthConfig

settings.register_profile("repo", deadline=None, derandomize=True, print_blob=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# Filled by tests/test_acceptance.py, echoed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_SYNTH = SynthConfig(
    modalities=(ModalitySpec("depth", 1, 6, 6), ModalitySpec("flow", 2, 4, 4)),
    train_videos=2, test_videos=2, frames_per_video=24, anomaly_rate=0.25,
    anomalous_modalities=("flow",),
)


def tiny_config(out_dir, **training):
    """A RunConfig small enough for second-scale CLI and pipeline tests."""
    cfg = load_config(None, output_dir=str(out_dir))
    cfg.synth = replace(TINY_SYNTH)
    cfg.arch.cae_widths = (4, 8)
    cfg.arch.fusion_depth = 2
    cfg.arch.fusion_width = 4
    t = cfg.training
    t.pretrain_epochs, t.finetune_epochs, t.batch_size = 2, 2, 16
    for k, v in training.items():
        setattr(t, k, v)
    cfg.validate()
    return cfg
