from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

from handgen.codec import ImageCodec
from handgen.config import ExperimentConfig
from handgen.data import generate_dataset, load_dataset
from handgen.model import HandDiffusion
from handgen.training import TrainState, run_codec_training, train


def tiny_config(root: Path, n_steps: int = 20) -> ExperimentConfig:
    cfg = ExperimentConfig(data_dir=str(root / "dataset"), out_dir=str(root / "run"))
    cfg.codec_ckpt = str(root / "codec.safetensors")
    cfg.codec.steps = 30
    cfg.codec.extra_samples = 4
    cfg.train.base_steps = 30
    cfg.train.steps = n_steps
    cfg.train.batch_size = 4
    cfg.train.checkpoint_every = 10
    cfg.train.log_every = 1
    return cfg


@dataclass
class TinyRun:
    root: Path
    cfg: ExperimentConfig
    samples: list
    codec: ImageCodec
    state: TrainState


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory) -> TinyRun:
    """Four samples through codec, base pretraining and 20 guidance steps."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(root)
    generate_dataset(4, 3, cfg.data_dir)
    samples = load_dataset(cfg.data_dir)
    codec, _ = run_codec_training(cfg)
    state = train(cfg, samples, codec=codec)
    return TinyRun(root, cfg, samples, codec, state)


@pytest.fixture
def fresh_model() -> HandDiffusion:
    """Untrained model with a random codec; cheap to build."""
    torch.manual_seed(0)
    return HandDiffusion.create(ExperimentConfig(), ImageCodec(4, 64), seed=0)


# ------------------------------------------------------------ acceptance report


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion number and short name")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failing setup also counts as a failed criterion
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n, name = marker.args
        detail = dict(item.user_properties).get("detail", "")
        item.config._criteria[n] = (name, "PASS" if rep.passed else "FAIL", detail)


def pytest_sessionstart(session):
    session.config._criteria = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(criteria):
        name, status, detail = criteria[n]
        line = f"criterion {n:2d} {status}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
