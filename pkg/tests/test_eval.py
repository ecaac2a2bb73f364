"""mIoU metric, task evaluation, and shot sweeps."""

import numpy as np
import pytest

from metaseg.autodiff import AdamState
from metaseg.checkpoint import pack_state
from metaseg.embed import EmbedConfig, build_embedding
from metaseg.episodes import SynthConfig, gen_synthetic, split_classes
from metaseg.errors import ValidationError
from metaseg.evaluation import evaluate, evaluate_model, miou, shot_sweep
from metaseg.heads import RidgeHead
from metaseg.trainer import trainable_tensors

MICRO = EmbedConfig.micro(4)


@pytest.fixture(scope="module")
def eval_dataset():
    ds = gen_synthetic(SynthConfig(num_classes=8, images_per_class=14, seed=6))
    return split_classes(ds, [2, 6])


def micro_checkpoint(seed=0, head_kind="ridge"):
    params = build_embedding(MICRO, seed=seed)
    head = RidgeHead.create()
    adam = AdamState.create(trainable_tensors(params, head, head_kind))
    cfg = {"train": {"head": head_kind, "lr": 0.001}}
    return pack_state(cfg, MICRO, params, head, adam, epochs_done=0, base_seed=seed)


# ------------------------------------------------------------------- miou


def test_miou_identity_masks():
    m = np.array([[0, 1], [2, 0]])
    ious, mean = miou(m, m, 3)
    np.testing.assert_array_equal(ious, 1.0)
    assert mean == 1.0


def test_miou_half_background_prediction():
    # gt: half class 1, half class 0; prediction: everything class 0
    gt = np.array([[1, 1], [0, 0]])
    pred = np.zeros((2, 2), dtype=int)
    ious, mean = miou(pred, gt, 2)
    assert ious[0] == pytest.approx(0.5)
    assert ious[1] == pytest.approx(0.0)
    assert mean == pytest.approx(0.25)


def test_miou_absent_class_excluded():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 0], [1, 1]])
    ious, mean = miou(pred, gt, 5)
    assert np.isnan(ious[2:]).all()
    assert mean == 1.0


def test_miou_all_background_task():
    z = np.zeros((3, 3), dtype=int)
    _, mean = miou(z, z, 3)
    assert mean == 1.0


def test_miou_symmetric_under_joint_relabeling():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 3, size=(6, 6))
    pred = rng.integers(0, 3, size=(6, 6))
    perm = np.array([2, 0, 1])
    ious, mean = miou(pred, gt, 3)
    ious_p, mean_p = miou(perm[pred], perm[gt], 3)
    assert mean == pytest.approx(mean_p)
    np.testing.assert_allclose(np.sort(ious), np.sort(ious_p))


def test_miou_validation():
    with pytest.raises(ValidationError):
        miou(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int), 2)
    with pytest.raises(ValidationError):
        miou(np.full((2, 2), 7), np.zeros((2, 2), dtype=int), 3)


# --------------------------------------------------------------- evaluate


def test_evaluate_report_and_determinism(eval_dataset):
    ckpt = micro_checkpoint()
    r1 = evaluate(ckpt, eval_dataset, split="novel", k=2, n=2, q=1, num_tasks=4, seed=5)
    r2 = evaluate(ckpt, eval_dataset, split="novel", k=2, n=2, q=1, num_tasks=4, seed=5)
    assert r1.num_tasks == 4 and len(r1.tasks) == 4
    assert r1.mean_miou == r2.mean_miou
    assert [t.miou for t in r1.tasks] == [t.miou for t in r2.tasks]
    assert 0.0 <= r1.mean_miou <= 1.0
    vals = [t.miou for t in r1.tasks]
    assert min(vals) <= r1.mean_miou <= max(vals)


def test_evaluate_does_not_mutate_checkpoint(eval_dataset):
    ckpt = micro_checkpoint()
    before = {k: v.tobytes() for k, v in ckpt.tensors.items()}
    evaluate(ckpt, eval_dataset, split="novel", k=2, n=2, q=1, num_tasks=2, seed=1)
    after = {k: v.tobytes() for k, v in ckpt.tensors.items()}
    assert before == after


def test_evaluate_zero_tasks_rejected(eval_dataset):
    with pytest.raises(ValidationError):
        evaluate(micro_checkpoint(), eval_dataset, num_tasks=0)


def test_evaluate_seed_changes_tasks_not_model(eval_dataset):
    ckpt = micro_checkpoint()
    r1 = evaluate(ckpt, eval_dataset, split="novel", k=2, n=2, q=1, num_tasks=3, seed=1)
    r2 = evaluate(ckpt, eval_dataset, split="novel", k=2, n=2, q=1, num_tasks=3, seed=2)
    assert [t.seed for t in r1.tasks] != [t.seed for t in r2.tasks]


def test_evaluate_csv(eval_dataset, tmp_path):
    rep = evaluate(micro_checkpoint(), eval_dataset, split="novel", k=2, n=2, q=1, num_tasks=3, seed=5)
    out = tmp_path / "report.csv"
    rep.write_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "task_seed,iou_0,iou_1,iou_2,miou"
    assert len(lines) == 4


@pytest.mark.parametrize("head_kind", ["prototype", "convstep"])
def test_evaluate_ablation_heads_run(eval_dataset, head_kind):
    rep = evaluate(micro_checkpoint(head_kind=head_kind), eval_dataset, split="novel",
                   k=2, n=2, q=1, num_tasks=2, seed=3)
    assert np.isfinite(rep.mean_miou)


# -------------------------------------------------------------- shot sweep


def test_shot_sweep_rows_and_shared_queries(eval_dataset):
    ckpt = micro_checkpoint()
    sweep = shot_sweep(ckpt, eval_dataset, k=2, shots=[1, 3], q=1, num_tasks=3, seed=4)
    assert sweep.shots == [1, 3]
    assert len(sweep.reports) == 2
    assert all(r.num_tasks == 3 for r in sweep.reports)
    assert [t.seed for t in sweep.reports[0].tasks] == [t.seed for t in sweep.reports[1].tasks]


def test_shot_sweep_singleton_matches_evaluate(eval_dataset):
    ckpt = micro_checkpoint()
    sweep = shot_sweep(ckpt, eval_dataset, k=2, shots=[2], q=1, num_tasks=3, seed=9)
    direct = evaluate(ckpt, eval_dataset, split="novel", k=2, n=2, q=1, num_tasks=3, seed=9)
    assert sweep.reports[0].mean_miou == pytest.approx(direct.mean_miou)


def test_shot_sweep_csv_and_text(eval_dataset, tmp_path):
    sweep = shot_sweep(micro_checkpoint(), eval_dataset, k=2, shots=[1, 2], q=1, num_tasks=2, seed=0)
    text = sweep.format_text()
    assert "shot" in text and len(text.splitlines()) == 3
    out = tmp_path / "sweep.csv"
    sweep.write_csv(out)
    assert len(out.read_text().strip().splitlines()) == 3


def test_shot_sweep_validates_shots(eval_dataset):
    with pytest.raises(ValidationError):
        shot_sweep(micro_checkpoint(), eval_dataset, k=2, shots=[], q=1, num_tasks=1, seed=0)
    with pytest.raises(ValidationError):
        shot_sweep(micro_checkpoint(), eval_dataset, k=2, shots=[0, 2], q=1, num_tasks=1, seed=0)
