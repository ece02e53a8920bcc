"""Acceptance criteria 1-8. Each criterion records one PASS/FAIL line that is
printed in the session summary; the gated ones also assert.

The training criteria (3, 4, 5) take minutes and carry the ``slow`` marker.
"""

import json
import time

import numpy as np
import pytest
import torch

from analogic.cli import DEFAULTS
from analogic.evaluate import (LOSS_NAMES, NON_REPRODUCIBILITY_STATEMENT, calibrate_z, evaluate_gist_oracle,
                               evaluate_zero_shot, gradcheck, sweep_interpolation)
from analogic.fog_synth import FogParams, SceneSpec, generate_scene, oracle_gist, render_fog
from analogic.gist_core import Gist, Z_PRESETS, apply_gist, interpolate_domain, invert_gist
from analogic.networks import load_checkpoint
from analogic.objectives import LossWeights
from analogic.trainer import ABLATIONS, TrainConfig, load_training_data, train, translate

from .conftest import ACCEPTANCE_LINES

# pinned seeds and budgets for the training criteria
SEED = 0
SUP_STEPS = 2000
SUP_BUDGET_S = 300
FULL_STEPS = 2000
FULL_BUDGET_S = 600
# ablation variants are compared against the full run's checkpoint at the same step
ABLATION_STEPS = 1000
VAL_COUNT = 16


def record(n, ok, detail, gated=True):
    tag = "PASS" if ok else "FAIL"
    if not gated:
        tag = f"REPORT ({tag.lower()})"
    ACCEPTANCE_LINES.append(f"criterion {n}: {tag} - {detail}")
    if gated:
        assert ok, detail


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_correctness():
    t = time.perf_counter()
    errs = {name: gradcheck(name, seed=SEED) for name in LOSS_NAMES}
    elapsed = time.perf_counter() - t
    worst = max(errs.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
    record(1, worst < 1e-4 and elapsed < 60, f"max rel err {worst:.1e} < 1e-4 ({detail}); {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------- 2


def test_criterion_2_algebraic_invariants():
    rng = np.random.default_rng(SEED)
    endpoints_ok, inv_err, fog_err = True, 0.0, 0.0
    for i in range(100):
        img, depth = generate_scene(SceneSpec(seed=i, width=64, height=32, style=("source", "target")[i % 2]))
        p = FogParams(beta=float(rng.uniform(0.03, 0.15)), airlight=tuple(rng.uniform(0.7, 1.0, 3)))
        g = oracle_gist(depth, p)
        endpoints_ok &= np.array_equal(interpolate_domain(img, g, 0.0), img)
        endpoints_ok &= np.array_equal(interpolate_domain(img, g, 1.0), apply_gist(img, g))
        r = Gist(rng.uniform(0.2, 3.0, img.shape), rng.uniform(-1, 1, img.shape))
        back = apply_gist(apply_gist(img, r), invert_gist(r))
        inv_err = max(inv_err, float(np.abs(back - img).max()))
        fog_err = max(fog_err, float(np.abs(apply_gist(img, g) - render_fog(img, depth, p)).max()))
    ok = endpoints_ok and inv_err < 1e-10 and fog_err < 1e-12
    record(2, ok, f"z endpoints bitwise={endpoints_ok}; inversion round trip {inv_err:.1e} < 1e-10; "
                  f"apply_gist vs render_fog {fog_err:.1e} < 1e-12")


# ---------------------------------------------------------------- 3


@pytest.mark.slow
def test_criterion_3_oracle_gist_recovery(toy_dataset, tmp_path):
    cfg = TrainConfig(steps=SUP_STEPS, seed=SEED, checkpoint_interval=SUP_STEPS)
    cfg.ablate(["gist_adv", "cyc", "percep", "dep"])
    t = time.perf_counter()
    ckpt = train(toy_dataset, cfg, tmp_path)
    elapsed = time.perf_counter() - t
    m_src, _ = evaluate_gist_oracle(ckpt, toy_dataset, split="source")
    m_held, _ = evaluate_gist_oracle(ckpt, toy_dataset)
    ok = m_src < 0.05 and elapsed < SUP_BUDGET_S
    record(3, ok, f"supervised-only {SUP_STEPS} steps: source gist_M_mae {m_src:.4f} < 0.05 "
                  f"(held-out target {m_held:.4f}); {elapsed:.0f}s < {SUP_BUDGET_S}s")


# ---------------------------------------------------------------- 4, 5


def _train_variant(dataset, out, ablate=()):
    cfg = TrainConfig(steps=FULL_STEPS if not ablate else ABLATION_STEPS, seed=SEED,
                      checkpoint_interval=ABLATION_STEPS).ablate(list(ablate))
    t = time.perf_counter()
    ckpt = train(dataset, cfg, out)
    return ckpt, time.perf_counter() - t


def _zero_shot(ckpt, dataset):
    held = dataset.heldout
    z, _ = calibrate_z(ckpt, dataset, held[:VAL_COUNT])
    return evaluate_zero_shot(ckpt, dataset, z, entries=held[VAL_COUNT:])


@pytest.fixture(scope="module")
def full_run(toy_dataset, tmp_path_factory):
    ckpt, elapsed = _train_variant(toy_dataset, tmp_path_factory.mktemp("full"))
    return ckpt, elapsed, _zero_shot(ckpt, toy_dataset)


@pytest.mark.slow
def test_criterion_4_zero_shot_translation(full_run):
    ckpt, elapsed, rep = full_run
    ratio = rep.zero_shot_l1 / rep.baseline_l1
    ok = ratio < 0.5 and elapsed < FULL_BUDGET_S
    record(4, ok, f"full objective {FULL_STEPS} steps, calibrated z={rep.z:.2f}: zero_shot_l1 {rep.zero_shot_l1:.4f} "
                  f"= {ratio:.3f} x baseline {rep.baseline_l1:.4f} (< 0.5); depth_corr {rep.depth_corr:.3f}; "
                  f"{elapsed:.0f}s < {FULL_BUDGET_S}s")


@pytest.mark.slow
def test_criterion_4_trained_model_properties(full_run, toy_dataset):
    """Derived checks on the trained model: monotone domainness, fog grows with depth."""
    ckpt, _, rep = full_run
    state = load_checkpoint(ckpt)[0]
    imgs = np.stack([toy_dataset.load_clear(e) for e in toy_dataset.heldout])
    half = np.abs(translate(state, imgs, 0.5) - imgs).mean()
    full = np.abs(translate(state, imgs, 1.0) - imgs).mean()
    assert full >= half
    zs = [i / 10 for i in range(11)]
    for img in imgs[:8]:
        curve = sweep_interpolation(state, img, zs)
        assert all(b >= a - 1e-3 for a, b in zip(curve, curve[1:]))
    assert rep.depth_corr > 0


@pytest.mark.slow
def test_criterion_5_ablation_direction(full_run, toy_dataset, tmp_path):
    full_ckpt = full_run[0].parent / f"ckpt_{ABLATION_STEPS}.analogic"
    full_rep = _zero_shot(full_ckpt, toy_dataset)
    scores = {}
    for name in ("gist_adv", "cyc", "percep", "dep"):
        ckpt, _ = _train_variant(toy_dataset, tmp_path / name, ablate=(name,))
        scores[name] = _zero_shot(ckpt, toy_dataset).zero_shot_l1
    ok = all(full_rep.zero_shot_l1 <= v for v in scores.values())
    table = ", ".join(f"w/o {k} {v:.4f}" for k, v in scores.items())
    record(5, ok, f"full {full_rep.zero_shot_l1:.4f} vs {table} ({ABLATION_STEPS} steps each)", gated=False)


# ---------------------------------------------------------------- 6


def test_criterion_6_sharing_invariants(toy_dataset, tmp_path):
    cfg = TrainConfig(steps=100, seed=SEED, checkpoint_interval=100)
    state = load_checkpoint(train(toy_dataset, cfg, tmp_path))[0]
    tied = state.G_AA is state.G_BB and state.G_AA_inv is state.G_BB_inv
    x = torch.rand(2, 3, 32, 64, generator=torch.Generator().manual_seed(SEED))
    with torch.no_grad():
        same = all(torch.equal(a, b) for a, b in zip(state.G_AA(x), state.G_BB(x)))
        M0, N0, d0 = state.gen_forward(x)
        state.gen_forward.depth_head[1].weight.add_(0.1)
        M1, N1, d1 = state.gen_forward(x)
    isolated = torch.equal(M0, M1) and torch.equal(N0, N1) and not torch.equal(d0, d1)
    record(6, tied and same and isolated, f"after 100 steps tied pairs aliased={tied}, outputs bitwise equal={same}; "
                                          f"depth-head perturbation leaves gist unchanged={isolated}")


# ---------------------------------------------------------------- 7


def test_criterion_7_published_defaults():
    w = LossWeights()
    train_defaults = DEFAULTS["train"]
    ok = (TrainConfig().learning_rate == 0.0002 and train_defaults["lr"] == 0.0002
          and (w.w_gist_adv, w.w_cyc_adv) == (3, 1)
          and w.w_sup == w.w_rec == w.w_dep == w.w_percep == 10
          and train_defaults["w_gist_adv"] == 3 and train_defaults["w_cyc_adv"] == 1
          and sorted(Z_PRESETS.values()) == [0.88, 0.9])
    record(7, ok, f"lr {train_defaults['lr']}, weights gist_adv {w.w_gist_adv} cyc_adv {w.w_cyc_adv} "
                  f"others {w.w_sup}, z presets {sorted(Z_PRESETS.values())}")


# ---------------------------------------------------------------- 8


def test_criterion_8_non_reproducibility_statement(small_dataset, tmp_path):
    from analogic.networks import ArchConfig, build_model

    state = build_model(ArchConfig(height=16, width_px=16, width=4, n_res=1))
    path = evaluate_zero_shot(state, small_dataset, z=0.9).write(tmp_path / "report.json")
    text = json.loads(path.read_text())["statement"]
    needles = ("mIoU", "Tables 1-3", "S1-S5", "61.0%", "66.7%", "NOT", "reproducible")
    record(8, text == NON_REPRODUCIBILITY_STATEMENT and all(n in text for n in needles),
           "evaluation report states that the mIoU tables and AMT preference rates are not reproducible")
