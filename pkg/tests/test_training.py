import copy
import csv
import json
from pathlib import Path

import pytest
import torch
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file

from handgen import checkpoint as ckpt
from handgen.config import ExperimentConfig
from handgen.sampling import generate
from handgen.training import (
    LOG_FIELDS,
    draw_batch,
    guidance_optimizer,
    load_checkpoint,
    prepare_data,
    save_checkpoint,
    train,
    training_step,
)
from handgen.vas import checksum

from conftest import tiny_config


@pytest.fixture
def setup(tiny_run):
    """A private copy of the trained tiny model plus a drawn batch."""
    model = copy.deepcopy(tiny_run.state.model)
    model.rebuild_guidance()
    data = prepare_data(model, tiny_run.samples)
    with torch.no_grad():
        text = model.text(data.prompts)
    gen = torch.Generator().manual_seed(5)
    batch = draw_batch(data, text, 4, model.schedule.T, gen)
    return model, batch


def test_loss_weights(setup):
    model, batch = setup
    model.cfg.train.lambda_g, model.cfg.train.lambda_l = 1.0, 0.0
    out = training_step(model, batch, None).losses
    assert out["L_total"] == out["L_g"]
    model.cfg.train.lambda_g, model.cfg.train.lambda_l = 0.3, 2.0
    out = training_step(model, batch, None).losses
    assert out["L_total"] == pytest.approx(0.3 * out["L_g"] + 2.0 * out["L_l"], rel=1e-6)


def test_step_zero_equals_base_ldm_loss(setup):
    model, batch = setup
    res = training_step(model, batch, None)
    with torch.no_grad():
        pg, pl = model.pair.base_forward(res.x_hat, batch.text, batch.t)
    ref_g = F.mse_loss(pg, res.eps_hat[0]).item()
    ref_l = F.mse_loss(pl, res.eps_hat[1]).item()
    assert res.losses["L_g"] == pytest.approx(ref_g, abs=1e-6)
    assert res.losses["L_l"] == pytest.approx(ref_l, abs=1e-6)


def test_tas_disabled_uses_true_noise(setup):
    model, batch = setup
    model.cfg.tas.enabled = False
    res = training_step(model, batch, None)
    assert res.eps_hat[0] is batch.eps[0] and res.eps_hat[1] is batch.eps[1]
    assert res.losses["L_tas"] > 0
    assert torch.isnan(torch.tensor(training_step(model, batch, None, measure_tas=False).losses["L_tas"]))


def test_tas_enabled_changes_target(setup):
    model, batch = setup
    res = training_step(model, batch, None)
    assert not torch.equal(res.eps_hat[0], batch.eps[0])


def test_gradient_isolation(setup):
    model, batch = setup
    opt = guidance_optimizer(model.pair, 1e-3)
    frozen = {
        "base": copy.deepcopy(model.base.state_dict()),
        "text": copy.deepcopy(model.text.state_dict()),
        "codec": copy.deepcopy(model.codec.state_dict()),
    }
    g_before = copy.deepcopy(model.pair.theta_g.state_dict())
    training_step(model, batch, opt)
    for name, module in (("base", model.base), ("text", model.text), ("codec", model.codec)):
        now = module.state_dict()
        assert all(torch.equal(now[k], frozen[name][k]) for k in now), name
    g_after = model.pair.theta_g.state_dict()
    assert any(not torch.equal(g_after[k], g_before[k]) for k in g_after)


def test_frozen_checksum_over_run(tiny_run):
    state = tiny_run.state
    assert state.base_checksum == checksum(state.model.base)
    base = load_checkpoint(Path(tiny_run.cfg.out_dir) / "base.safetensors")
    assert checksum(base.model.base) == state.base_checksum


def test_loss_log(tiny_run):
    rows = list(csv.DictReader(open(Path(tiny_run.cfg.out_dir) / "loss.csv")))
    assert list(rows[0]) == LOG_FIELDS
    assert [int(r["step"]) for r in rows] == list(range(1, 21))
    base_rows = list(csv.DictReader(open(Path(tiny_run.cfg.out_dir) / "base_loss.csv")))
    assert float(base_rows[-1]["L_total"]) < float(base_rows[0]["L_total"])


def test_resume_matches_uninterrupted(tiny_run, tmp_path):
    cfg = tiny_config(tiny_run.root)
    cfg.out_dir = str(tmp_path / "split")
    cfg.train.steps = 8
    cfg.train.checkpoint_every = 4
    train(cfg, tiny_run.samples, resume=Path(tiny_run.cfg.out_dir) / "base.safetensors", stop_at=4)
    resumed = train(cfg, tiny_run.samples, resume=tmp_path / "split" / "step_000004.safetensors")
    cfg.out_dir = str(tmp_path / "whole")
    whole = train(cfg, tiny_run.samples, resume=Path(tiny_run.cfg.out_dir) / "base.safetensors")
    a = (tmp_path / "split" / "loss.csv").read_text()
    b = (tmp_path / "whole" / "loss.csv").read_text()
    assert a == b
    sa, sb = resumed.model.pair.theta_g.state_dict(), whole.model.pair.theta_g.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_save_load_save_byte_identical(tiny_run, tmp_path):
    path = Path(tiny_run.cfg.out_dir) / "last.safetensors"
    state = load_checkpoint(path)
    save_checkpoint(tmp_path / "again.safetensors", state)
    assert (tmp_path / "again.safetensors").read_bytes() == path.read_bytes()


def test_load_then_generate_identical(tiny_run):
    s = tiny_run.samples[0]
    before = generate(tiny_run.state.model, s.mesh_global, s.bbox, s.prompt, steps=10, seed=3)
    loaded = load_checkpoint(Path(tiny_run.cfg.out_dir) / "last.safetensors").model
    after = generate(loaded, s.mesh_global, s.bbox, s.prompt, steps=10, seed=3)
    assert (before == after).all()


def test_config_hash_mismatch(tiny_run):
    cfg = tiny_config(tiny_run.root)
    cfg.train.lambda_l = 0.5
    with pytest.raises(ckpt.CheckpointError, match="config hash mismatch"):
        load_checkpoint(Path(tiny_run.cfg.out_dir) / "last.safetensors", cfg)


def test_version_mismatch_names_both(tiny_run, tmp_path):
    src = Path(tiny_run.cfg.out_dir) / "last.safetensors"
    with safe_open(str(src), framework="pt") as f:
        meta = dict(f.metadata())
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    meta["format_version"] = "99"
    save_file(tensors, str(tmp_path / "old.safetensors"), metadata=meta)
    with pytest.raises(ckpt.CheckpointError, match="expected 1, found 99"):
        load_checkpoint(tmp_path / "old.safetensors")


def test_wrong_kind_and_missing(tiny_run, tmp_path):
    with pytest.raises(ckpt.CheckpointError, match="expected a model checkpoint"):
        load_checkpoint(tiny_run.cfg.codec_ckpt)
    with pytest.raises(ckpt.CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.safetensors")
    (tmp_path / "junk.safetensors").write_bytes(b"not a checkpoint")
    with pytest.raises(ckpt.CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "junk.safetensors")


def test_unwritable_output(tiny_run, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = tiny_config(tiny_run.root)
    cfg.out_dir = str(blocker / "run")
    with pytest.raises(ckpt.CheckpointError):
        train(cfg, tiny_run.samples, codec=tiny_run.codec)


def test_checkpoint_metadata(tiny_run):
    with safe_open(str(Path(tiny_run.cfg.out_dir) / "last.safetensors"), framework="pt") as f:
        meta = f.metadata()
        keys = set(f.keys())
    assert meta["kind"] == "model" and meta["phase"] == "guidance" and meta["step"] == "20"
    assert meta["config_hash"] == tiny_run.cfg.model_hash()
    assert len(json.loads(meta["betas"])) == 100
    assert any(k.startswith("optim.") for k in keys) and "rng.train" in keys


def test_config_validation():
    cfg = ExperimentConfig()
    cfg.train.lambda_g = cfg.train.lambda_l = 0.0
    with pytest.raises(ValueError):
        cfg.validate()
