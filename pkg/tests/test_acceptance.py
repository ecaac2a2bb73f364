"""Acceptance suite: one test per criterion, pass/fail printed per line.

The pinned synthetic configuration (14 classes, 10 train / 4 novel, 32x32,
checksummed) is trained from scratch on the CPU. Trained checkpoints are
cached under METASEG_ACCEPTANCE_CACHE when that env var is set, so reruns
skip the training; without it everything runs inside the pytest tmp dir.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from metaseg.checkpoint import load_checkpoint, save_checkpoint
from metaseg.embed import EmbedConfig, build_embedding, count_params
from metaseg.episodes import SynthConfig, dataset_hash, gen_synthetic, split_classes
from metaseg.evaluation import evaluate, evaluate_model, shot_sweep
from metaseg.heads import RidgeHead
from metaseg.trainer import TrainConfig, meta_train
from metaseg.util import derive_seed
from metaseg.verify import (
    check_autodiff_misc,
    check_checkpoint_roundtrip,
    check_op_gradients,
    check_pipeline_gradient,
    check_ridge_oracle,
    check_sampler_invariants,
)

PINNED_SYNTH = SynthConfig(num_classes=14, images_per_class=64, image_size=32, seed=7)
PINNED_NOVEL = (3, 5, 7, 11)
PINNED_DATASET_SHA256 = "874cb3161064e8ae24f666e6fc8bb1afd1f3efb899fd518a4477d65bbb348211"

DESK_EMBED = EmbedConfig(block_channels=(16, 32, 32, 64, 16))
MAIN_TRAIN = TrainConfig(k=2, n=5, q=2, episodes_per_epoch=200, epochs=20, lr=0.001, seed=1)

EVAL_TASKS = 200
EVAL_SEED = derive_seed("acceptance", "eval")
CONTROL_SEED = derive_seed("acceptance", "control-init")

TRAIN_BUDGET_S = 45 * 60
VERIFY_BUDGET_S = 10 * 60


def _announce(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    env = os.environ.get("METASEG_ACCEPTANCE_CACHE")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset():
    ds = split_classes(gen_synthetic(PINNED_SYNTH), PINNED_NOVEL)
    assert dataset_hash(ds) == PINNED_DATASET_SHA256, "pinned dataset changed"
    return ds


def _train_cached(dataset, config, embed, cache: Path, tag: str):
    """Train once per (tag, config); reuse checkpoint + wall time from cache."""
    ckpt_path = cache / f"{tag}.ckpt"
    wall_path = cache / f"{tag}.wall"
    loss_path = cache / f"{tag}.losses"
    if ckpt_path.exists() and wall_path.exists() and loss_path.exists():
        losses = [float(x) for x in loss_path.read_text().split()]
        return load_checkpoint(ckpt_path), losses, float(wall_path.read_text())
    t0 = time.perf_counter()
    ckpt, metrics = meta_train(dataset, config, embed=embed)
    wall = time.perf_counter() - t0
    save_checkpoint(ckpt_path, ckpt)
    wall_path.write_text(f"{wall:.3f}")
    loss_path.write_text(" ".join(f"{m.mean_loss:.6f}" for m in metrics))
    return ckpt, [m.mean_loss for m in metrics], wall


@pytest.fixture(scope="session")
def main_run(dataset, cache_dir):
    return _train_cached(dataset, MAIN_TRAIN, DESK_EMBED, cache_dir, "main")


@pytest.fixture(scope="session")
def main_eval(main_run, dataset):
    ckpt, _, _ = main_run
    return evaluate(ckpt, dataset, split="novel", k=2, n=5, q=2,
                    num_tasks=EVAL_TASKS, seed=EVAL_SEED)


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    checks = [check_op_gradients(), check_pipeline_gradient(), check_autodiff_misc()]
    wall = time.perf_counter() - t0
    ok = all(c[1] for c in checks) and wall <= VERIFY_BUDGET_S
    detail = "; ".join(f"{c[0]}: {c[2]}" for c in checks) + f"; wall {wall:.0f}s"
    _announce("criterion 1 (gradient correctness, rtol 1e-4 f64)", ok, detail)
    for name, passed, d in checks:
        assert passed, f"{name}: {d}"
    assert wall <= VERIFY_BUDGET_S


def test_criterion_2_closed_form_fidelity():
    name, ok, detail = check_ridge_oracle(num_combos=50)
    _announce("criterion 2 (closed-form vs GD oracle + Woodbury)", ok, detail)
    assert ok, detail


def test_criterion_3_desk_scale_learning(dataset, main_run, main_eval):
    ckpt, losses, wall = main_run
    trained = main_eval.mean_miou

    params = build_embedding(DESK_EMBED, seed=CONTROL_SEED)
    control_rep = evaluate_model(
        params, RidgeHead.create(), "ridge", dataset, split="novel", k=2, n=5, q=2,
        num_tasks=EVAL_TASKS, seed=EVAL_SEED,
    )
    control = control_rep.mean_miou
    early = float(np.mean(losses[:5]))
    late = float(np.mean(losses[15:20])) if len(losses) >= 20 else float(np.mean(losses[-5:]))
    ok = (
        trained >= 0.50
        and (control <= 0 or trained >= 3.0 * control)
        and wall <= TRAIN_BUDGET_S
        and late < early
    )
    detail = (
        f"trained mIoU {trained:.4f} (need >= 0.50), control {control:.4f}, "
        f"ratio {trained / max(control, 1e-9):.2f}x (need >= 3), train wall {wall:.0f}s "
        f"(budget {TRAIN_BUDGET_S}s), loss epochs1-5 {early:.3f} > epochs16-20 {late:.3f}"
    )
    _announce("criterion 3 (desk-scale learning)", ok, detail)
    assert trained >= 0.50, detail
    assert trained >= 3.0 * control, detail
    assert wall <= TRAIN_BUDGET_S, detail
    assert late < early, detail


def test_criterion_4_shot_monotonicity(dataset, main_run):
    ckpt, _, _ = main_run
    sweep = shot_sweep(ckpt, dataset, k=2, shots=[1, 5], q=2,
                       num_tasks=EVAL_TASKS, seed=derive_seed("acceptance", "shots"))
    one, five = sweep.reports[0].mean_miou, sweep.reports[1].mean_miou
    ok = five >= one + 0.02
    detail = f"1-shot {one:.4f}, 5-shot {five:.4f}, gap {five - one:.4f} (need >= 0.02)"
    _announce("criterion 4 (shot monotonicity)", ok, detail)
    assert ok, detail


@pytest.fixture(scope="session")
def ablation_runs(dataset, cache_dir, main_run):
    # all three arms share the main run's full budget and seed; the GC-on
    # ridge arm IS the main checkpoint
    arms = {
        "nogc_ridge": replace(MAIN_TRAIN, head="ridge", gc_branch_enabled=False),
        "nogc_convstep": replace(MAIN_TRAIN, head="convstep", gc_branch_enabled=False),
    }
    out = {"gc_ridge": main_run[0]}
    for tag, cfg in arms.items():
        ckpt, _, _ = _train_cached(dataset, cfg, DESK_EMBED, cache_dir, tag)
        out[tag] = ckpt
    return out


def test_criterion_5_ablation_ordering(dataset, ablation_runs):
    seed = derive_seed("acceptance", "ablation-eval")
    scores = {
        tag: evaluate(ckpt, dataset, split="novel", k=2, n=5, q=2,
                      num_tasks=EVAL_TASKS, seed=seed).mean_miou
        for tag, ckpt in ablation_runs.items()
    }
    head_gap = scores["nogc_ridge"] - scores["nogc_convstep"]
    gc_gap = scores["gc_ridge"] - scores["nogc_ridge"]
    ok = head_gap >= 0.02 and gc_gap >= 0.0
    detail = (
        f"ridge {scores['nogc_ridge']:.4f} vs convstep {scores['nogc_convstep']:.4f} "
        f"(gap {head_gap:.4f}, need >= 0.02); gc-on {scores['gc_ridge']:.4f} vs "
        f"gc-off {scores['nogc_ridge']:.4f} (gap {gc_gap:+.4f}, need >= 0)"
    )
    _announce("criterion 5 (ablation ordering)", ok, detail)
    assert head_gap >= 0.02, detail
    assert gc_gap >= 0.0, detail


def test_criterion_6_protocol_invariants():
    name, ok, detail = check_sampler_invariants(num_episodes=10_000)
    _announce("criterion 6 (protocol invariants, 10k episodes)", ok, detail)
    assert ok, detail


def test_criterion_7_parameter_count_sanity():
    n = count_params(build_embedding(EmbedConfig(), seed=0))
    ok = 10_500_000 <= n <= 15_700_000
    detail = f"full preset trainable params {n:,} in [10,500,000, 15,700,000]"
    _announce("criterion 7 (parameter count)", ok, detail)
    assert ok, detail


def test_criterion_8_persistence(dataset, tmp_path):
    name, ok, detail = check_checkpoint_roundtrip()
    assert ok, detail

    short = replace(MAIN_TRAIN, epochs=2, episodes_per_epoch=20, seed=31)
    full_ckpt, _ = meta_train(dataset, short, embed=EmbedConfig.micro(8))
    half_ckpt, _ = meta_train(dataset, replace(short, epochs=1), embed=EmbedConfig.micro(8))
    p = tmp_path / "half.ckpt"
    save_checkpoint(p, half_ckpt)
    resumed_ckpt, _ = meta_train(dataset, short, embed=EmbedConfig.micro(8),
                                 resume=load_checkpoint(p))
    identical = set(full_ckpt.tensors) == set(resumed_ckpt.tensors) and all(
        full_ckpt.tensors[k].tobytes() == resumed_ckpt.tensors[k].tobytes()
        for k in full_ckpt.tensors
    )
    ok = ok and identical
    detail = f"{detail}; resume-vs-uninterrupted bit-identical: {identical}"
    _announce("criterion 8 (persistence)", ok, detail)
    assert identical, "resumed training diverged from uninterrupted run"
