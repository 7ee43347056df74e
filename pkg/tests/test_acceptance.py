"""Acceptance criteria, one test each.

Run with ``pytest -v tests/test_acceptance.py``; a summary section prints one
PASS/FAIL line per criterion. Criterion 8 trains two full models and takes
roughly half an hour on one CPU core.
"""
import copy
import csv
import filecmp
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from handgen.codec import ImageCodec
from handgen.config import ExperimentConfig, TasConfig
from handgen.data.prompts import load_tagging_corpus, make_prompt
from handgen.data.dataset import random_pose
from handgen.data.tagging import tag_hand_tokens
from handgen.diffusion import make_schedule, q_sample
from handgen.model import HandDiffusion
from handgen.sampling import generate
from handgen.tas import gaussian_kernel, refine_attention, residual_noise, smooth, tas_loss, tas_objective, update_latents
from handgen.training import load_checkpoint, save_checkpoint, train
from handgen.vas import checksum

from conftest import tiny_config

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))
import overfit  # noqa: E402
import smoke  # noqa: E402

CFG = TasConfig()
CORPUS = load_tagging_corpus()


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds
        self.start = time.perf_counter()

    def check(self):
        elapsed = time.perf_counter() - self.start
        assert elapsed < self.seconds, f"took {elapsed:.1f}s, budget {self.seconds}s"
        return elapsed


def fresh(seed=0):
    torch.manual_seed(seed)
    return HandDiffusion.create(ExperimentConfig(), ImageCodec(4, 64), seed=seed)


def random_prompts(rng, b):
    return [make_prompt(random_pose(rng), rng) for _ in range(b)]


@pytest.mark.criterion(1, "zero-init equivalence")
def test_zero_init_equivalence(record_property):
    budget = Budget(60)
    model = fresh()
    g = torch.Generator().manual_seed(1)
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        b = int(rng.integers(1, 4))
        x = tuple(torch.randn(b, 4, 8, 8, generator=g) * 2 for _ in range(2))
        mesh = tuple(torch.rand(b, 3, 64, 64, generator=g) for _ in range(2))
        t = torch.randint(100, (b,), generator=g)
        with torch.no_grad():
            text = model.embed(random_prompts(rng, b))
            vas = model.pair(x, mesh, text, t)
            base = model.pair.base_forward(x, text, t)
        worst = max(worst, max((v - d).abs().max().item() for v, d in zip(vas, base)))
    record_property("detail", f"max |diff| {worst:.2e} over 50 inputs, {budget.check():.1f}s")
    assert worst <= 1e-6


@pytest.mark.criterion(2, "TAS gradient vs central finite differences")
def test_tas_gradient_finite_differences(record_property):
    budget = Budget(120)
    gen = torch.Generator().manual_seed(2)
    h = 1e-6
    worst = 0.0
    for trial in range(20):
        A = torch.randn(1, 4, 4, 8, generator=gen, dtype=torch.float64) * 3
        k = int(torch.randint(1, 4, (1,), generator=gen))
        hand = [sorted(torch.randperm(8, generator=gen)[:k].tolist())]

        def loss(a):
            return tas_loss(refine_attention(a, hand, CFG))[0]

        a = A.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(loss(a), a)
        fd = torch.zeros_like(A)
        flat = A.reshape(-1)
        for i in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += h
            minus[i] -= h
            fd.reshape(-1)[i] = (loss(plus.reshape(A.shape)) - loss(minus.reshape(A.shape))) / (2 * h)
        rel = ((grad - fd).norm() / fd.norm().clamp_min(1e-12)).item()
        worst = max(worst, rel)
    record_property("detail", f"max relative error {worst:.2e} over 20 trials, {budget.check():.1f}s")
    assert worst < 1e-3


@pytest.mark.criterion(3, "descent with alpha = 1e-3")
def test_descent_property(record_property):
    budget = Budget(120)
    model = fresh(3)
    unet = copy.deepcopy(model.base).double()
    rng = np.random.default_rng(3)
    gen = torch.Generator().manual_seed(3)
    hand_prompts = [r["prompt"] for r in CORPUS if r["hand_token_indices"]]
    ok = 0
    for _ in range(100):
        with torch.no_grad():
            text = model.embed([hand_prompts[int(rng.integers(len(hand_prompts)))]])
        text.K = text.K.double()
        x = tuple(torch.randn(1, 4, 8, 8, generator=gen, dtype=torch.float64) for _ in range(2))
        t = torch.randint(100, (1,), generator=gen)
        res = update_latents(x, text, t, unet, CFG, 100, alpha=1e-3)
        with torch.no_grad():
            after = tas_objective(unet, torch.cat(res.x_hat), torch.cat([t, t]), text.repeat(2), CFG)
        ok += bool((after <= res.loss).all())
    record_property("detail", f"{ok}/100 trials did not increase the loss, {budget.check():.1f}s")
    assert ok >= 95


@pytest.mark.criterion(4, "refinement conservation")
def test_refinement_conservation(record_property):
    budget = Budget(60)
    model = fresh()
    kernel = gaussian_kernel(CFG.gaussian_kernel_size, CFG.gaussian_sigma, torch.float32)
    plain = TasConfig(gaussian_sigma=0.0)
    gen = torch.Generator().manual_seed(4)
    worst_row, worst_mass = 0.0, 0.0
    for rec in CORPUS:
        with torch.no_grad():
            text = model.embed([rec["prompt"]])
        mask, hand = text.mask, text.hand_token_indices
        n = mask.shape[1]
        for scale in (0.1, 3.0, 30.0):
            A = torch.randn(1, 4, 4, n, generator=gen) * scale
            A[0, :, :, ~mask[0]] = float("-inf")
            soft = refine_attention(A, hand, plain, mask, strict=False)
            refined = refine_attention(A, hand, CFG, mask, strict=False)
            for k in hand[0]:
                col = soft.A_hat[0, ..., k]
                worst_row = max(worst_row, abs(col.sum().item() - 1.0))
                worst_mass = max(worst_mass, abs(smooth(col, kernel).sum().item() - col.sum().item()))
                worst_mass = max(worst_mass, abs(refined.A_hat[0, ..., k].sum().item() - col.sum().item()))
            others = [k for k in range(n) if k not in hand[0]]
            assert torch.equal(refined.A_hat[0, ..., others], A[0, ..., others])
    record_property("detail", f"softmax sum err {worst_row:.1e}, mass err {worst_mass:.1e}, {budget.check():.1f}s")
    assert worst_row <= 1e-5 and worst_mass <= 1e-5


@pytest.mark.criterion(5, "residual-noise identity")
def test_residual_noise_identity(record_property):
    budget = Budget(60)
    sched = make_schedule()
    gen = torch.Generator().manual_seed(5)
    worst = 0.0
    for _ in range(100):
        t = int(torch.randint(100, (1,), generator=gen))
        x0 = torch.randn(2, 4, 8, 8, generator=gen)
        eps = torch.randn(2, 4, 8, 8, generator=gen)
        update = torch.randn(2, 4, 8, 8, generator=gen) * float(torch.rand(1, generator=gen))
        x_t = q_sample(x0, t, eps, sched)
        x_hat = x_t + update
        for eps_hat in (residual_noise(x0, x_hat, t, sched), residual_noise(x0, x_hat, t, sched, x_t, eps)):
            worst = max(worst, (q_sample(x0, t, eps_hat, sched) - x_hat).abs().max().item())

    # a zero-size TAS step leaves the latents, and so the noise target, unchanged
    model = fresh(5)
    rng = np.random.default_rng(5)
    zero_err = 0.0
    for _ in range(5):
        t = torch.randint(100, (2,), generator=gen)
        x0 = torch.randn(2, 4, 8, 8, generator=gen)
        eps = torch.randn(2, 4, 8, 8, generator=gen)
        x_t = q_sample(x0, t, eps, sched)
        with torch.no_grad():
            text = model.embed(random_prompts(rng, 2))
        res = update_latents((x_t, x_t.clone()), text, t, model.base, CFG, 100, alpha=0.0)
        zero_err = max(zero_err, (residual_noise(x0, res.x_hat[0], t, sched, x_t, eps) - eps).abs().max().item())
    record_property("detail", f"round-trip err {worst:.1e}, zero-step eps err {zero_err:.1e}, {budget.check():.1f}s")
    assert worst <= 1e-6 and zero_err <= 1e-6


@pytest.mark.criterion(6, "tagger exactness on the 50-prompt corpus")
def test_tagger_exactness(record_property):
    budget = Budget(10)
    wrong = [r["prompt"] for r in CORPUS if tag_hand_tokens(r["tokens"]) != r["hand_token_indices"]]
    record_property("detail", f"{len(CORPUS) - len(wrong)}/{len(CORPUS)} agree, {budget.check():.2f}s")
    assert len(CORPUS) == 50 and not wrong, wrong


@pytest.mark.criterion(7, "frozen denoiser and shared branch weights")
def test_frozen_weights_and_sharing(tiny_run, tmp_path, record_property):
    budget = Budget(300)
    base_ckpt = Path(tiny_run.cfg.out_dir) / "base.safetensors"
    before = checksum(load_checkpoint(base_ckpt).model.base)
    cfg = tiny_config(tiny_run.root)
    cfg.out_dir = str(tmp_path / "run")
    cfg.train.steps = 1000
    cfg.train.checkpoint_every = 1000
    cfg.train.log_every = 100
    state = train(cfg, tiny_run.samples, resume=base_ckpt)
    after = checksum(state.model.base)
    reloaded = checksum(load_checkpoint(tmp_path / "run" / "last.safetensors").model.base)
    assert state.step == 1000
    assert before == after == reloaded == state.base_checksum

    pair = state.model.pair
    g = torch.Generator().manual_seed(7)
    x = torch.randn(3, 4, 8, 8, generator=g)
    mesh = torch.rand(3, 3, 64, 64, generator=g)
    t = torch.randint(100, (3,), generator=g)
    with torch.no_grad():
        text = state.model.embed(random_prompts(np.random.default_rng(7), 3))
        out_g, out_l = pair((x, x.clone()), (mesh, mesh.clone()), text, t)
    assert torch.count_nonzero(pair.guidance_forward((x, x), (mesh, mesh), text, t)[0]) > 0
    assert torch.equal(out_g, out_l)
    record_property("detail", f"checksum {after[:12]} unchanged over 1000 steps, {budget.check():.1f}s")


@pytest.mark.slow
@pytest.mark.criterion(8, "overfit generation, TAS on >= TAS off")
def test_overfit_generation(tmp_path, record_property):
    budget = Budget(45 * 60)
    summary = overfit.run(tmp_path, seed=0, n=16, steps=5000, config=None, eval_steps=None)
    iou = summary["mean_iou"]
    record_property(
        "detail",
        f"IoU TAS on {iou['tas_on']:.3f}, TAS off {iou['tas_off']:.3f}, {budget.check() / 60:.1f} min",
    )
    assert iou["tas_on"] >= 0.5
    assert iou["tas_on"] >= iou["tas_off"]


def _tree(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


@pytest.mark.criterion(9, "deterministic smoke pipeline")
def test_determinism(tmp_path, record_property):
    budget = Budget(600)
    work = tmp_path / "smoke"
    smoke.run(work, seed=0)
    shutil.move(work, tmp_path / "first")
    smoke.run(work, seed=0)
    files = _tree(work)
    assert files == _tree(tmp_path / "first")
    for kind in ("generated.png", "eval_images/00000.png", "report.json", "run/loss.csv", "run/last.safetensors"):
        assert kind in files
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "first", work, files, shallow=False)
    record_property("detail", f"{len(files)} files compared, {len(mismatch)} differ, {budget.check():.0f}s")
    assert not mismatch and not errors, mismatch


@pytest.mark.criterion(10, "checkpoint round trip")
def test_checkpoint_round_trip(tiny_run, tmp_path, record_property):
    budget = Budget(120)
    run_dir = Path(tiny_run.cfg.out_dir)
    s = tiny_run.samples[2]
    loaded = load_checkpoint(run_dir / "last.safetensors")
    for tas in (False, True):
        a = generate(tiny_run.state.model, s.mesh_global, s.bbox, s.prompt, steps=10, seed=9, tas=tas)
        b = generate(loaded.model, s.mesh_global, s.bbox, s.prompt, steps=10, seed=9, tas=tas)
        assert np.array_equal(a, b)
    save_checkpoint(tmp_path / "resaved.safetensors", loaded)
    assert (tmp_path / "resaved.safetensors").read_bytes() == (run_dir / "last.safetensors").read_bytes()

    cfg = tiny_config(tiny_run.root)
    cfg.out_dir = str(tmp_path / "resumed")
    train(cfg, tiny_run.samples, resume=run_dir / "step_000010.safetensors")

    def rows(path):
        return {r["step"]: r for r in csv.DictReader(open(path))}

    original, resumed = rows(run_dir / "loss.csv"), rows(tmp_path / "resumed" / "loss.csv")
    steps = [str(i) for i in range(11, 21)]
    assert all(resumed[k] == original[k] for k in steps)
    record_property("detail", f"generation and {len(steps)} resumed loss rows identical, {budget.check():.1f}s")
