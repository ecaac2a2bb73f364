"""Task-averaged mIoU evaluation over sampled episodes, plus shot sweeps."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace as dc_replace
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint, unpack_state
from .episodes import Episode, SegDataset, sample_episode
from .errors import ValidationError
from .pipeline import episode_logits, predict_masks
from .util import derive_seed


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int,
         include_background: bool = True) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean over classes present in either mask.

    A class absent from both prediction and ground truth contributes NaN to
    the per-class vector and is excluded from the mean. With
    ``include_background`` (the default), background (class 0) counts like
    any other class when present; with it off, the mean covers foreground
    classes only, the convention task evaluation uses (the per-class vector
    still reports background).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValidationError(f"{name} mask values outside [0, {num_classes})")
    ious = np.full(num_classes, np.nan)
    for k in range(num_classes):
        p = pred == k
        g = gt == k
        union = np.logical_or(p, g).sum()
        if union:
            ious[k] = np.logical_and(p, g).sum() / union
    scored = ious if include_background else ious[1:]
    present = ~np.isnan(scored)
    if not present.any():
        raise ValidationError("no scoreable class present in either input")
    return ious, float(scored[present].mean())


@dataclass
class TaskResult:
    seed: int
    ious: np.ndarray  # (K+1,) with NaN for absent classes
    miou: float
    pred_masks: Optional[np.ndarray] = None


@dataclass
class EvalReport:
    config: dict
    split: str
    k: int
    n_shot: int
    q: int
    num_tasks: int
    tasks: list[TaskResult] = field(default_factory=list)
    mean_miou: float = float("nan")
    std_miou: float = float("nan")
    wall_clock_s: float = 0.0

    def finalize(self) -> "EvalReport":
        vals = np.array([t.miou for t in self.tasks])
        self.mean_miou = float(vals.mean())
        self.std_miou = float(vals.std())
        return self

    def format_text(self) -> str:
        lines = [
            f"split={self.split} K={self.k} N={self.n_shot} Q={self.q} tasks={self.num_tasks}",
            f"mean task mIoU = {self.mean_miou:.4f} +- {self.std_miou:.4f}"
            f"  (wall {self.wall_clock_s:.1f}s)",
        ]
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            k1 = self.k + 1
            f.write("task_seed," + ",".join(f"iou_{c}" for c in range(k1)) + ",miou\n")
            for t in self.tasks:
                cells = ",".join("" if np.isnan(v) else f"{v:.6f}" for v in t.ious)
                f.write(f"{t.seed},{cells},{t.miou:.6f}\n")


def evaluate_task(params, head, kind: str, episode: Episode, convstep_lr: float = 0.001,
                  keep_masks: bool = False, task_seed: int = 0,
                  support_cap: int | None = None, include_background: bool = False) -> TaskResult:
    """Fit on support, predict query masks at full resolution, score mIoU.

    Task mIoU averages the foreground class IoUs by default, matching the
    usual few-shot segmentation protocol; background IoU is still computed
    and reported per class, and can be folded into the mean with
    ``include_background``.
    """
    logits, query_feats, query_masks = episode_logits(params, head, kind, episode, mode="eval",
                                                      convstep_lr=convstep_lr, support_cap=support_cap)
    n, h, w = query_masks.shape
    pred = predict_masks(logits, query_feats.n_images, query_feats.feat_h, query_feats.feat_w, h, w)
    ious, mean = miou(pred, query_masks, episode.k + 1, include_background=include_background)
    return TaskResult(seed=task_seed, ious=ious, miou=mean, pred_masks=pred if keep_masks else None)


def evaluate_model(
    params,
    head,
    kind: str,
    ds: SegDataset,
    split: str = "novel",
    k: int = 2,
    n: int = 5,
    q: int = 2,
    num_tasks: int = 100,
    seed: int = 0,
    convstep_lr: float = 0.001,
    keep_masks: bool = False,
    config_echo: Optional[dict] = None,
    support_cap: Optional[int] = None,
    include_background: bool = False,
) -> EvalReport:
    """Sample ``num_tasks`` episodes and aggregate task mIoU (unweighted mean)."""
    if num_tasks < 1:
        raise ValidationError("num_tasks must be >= 1")
    t0 = time.perf_counter()
    report = EvalReport(config=config_echo or {}, split=split, k=k, n_shot=n, q=q, num_tasks=num_tasks)
    for t in range(num_tasks):
        es = derive_seed(seed, "task", t)
        episode = sample_episode(ds, split, k, n, q, es)
        report.tasks.append(
            evaluate_task(params, head, kind, episode, convstep_lr=convstep_lr,
                          keep_masks=keep_masks, task_seed=es, support_cap=support_cap,
                          include_background=include_background)
        )
    report.wall_clock_s = time.perf_counter() - t0
    return report.finalize()


def evaluate(ckpt: Checkpoint, ds: SegDataset, split: str = "novel", k: int = 2, n: int = 5,
             q: int = 2, num_tasks: int = 100, seed: int = 0, keep_masks: bool = False,
             include_background: bool = False) -> EvalReport:
    """Evaluate a checkpoint; never mutates it (fresh model per call)."""
    _, params, head, _, _ = unpack_state(ckpt)
    tcfg = ckpt.config.get("train", {})
    return evaluate_model(
        params, head, tcfg.get("head", "ridge"), ds, split=split, k=k, n=n, q=q,
        num_tasks=num_tasks, seed=seed, convstep_lr=tcfg.get("convstep_lr", 0.001),
        keep_masks=keep_masks, config_echo=ckpt.config,
        support_cap=tcfg.get("support_px_cap"), include_background=include_background,
    )


@dataclass
class ShotSweep:
    shots: list[int]
    reports: list[EvalReport]

    def format_text(self) -> str:
        lines = ["shot  mean_miou  std_miou  tasks"]
        for s, r in zip(self.shots, self.reports):
            lines.append(f"{s:4d}  {r.mean_miou:9.4f}  {r.std_miou:8.4f}  {r.num_tasks:5d}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("shot,mean_miou,std_miou,num_tasks\n")
            for s, r in zip(self.shots, self.reports):
                f.write(f"{s},{r.mean_miou:.6f},{r.std_miou:.6f},{r.num_tasks}\n")


def _truncate_support(episode: Episode, shot: int) -> Episode:
    """Keep the first ``shot`` support pairs of each class (shared queries)."""
    full = episode.n_shot
    support = []
    for c in range(episode.k):
        support.extend(episode.support[c * full : c * full + shot])
    return dc_replace(episode, n_shot=shot, support=support)


def shot_sweep(
    ckpt: Checkpoint,
    ds: SegDataset,
    k: int,
    shots: list[int],
    q: int = 2,
    num_tasks: int = 100,
    seed: int = 0,
    split: str = "novel",
    include_background: bool = False,
) -> ShotSweep:
    """One evaluation per shot count; query draws are shared across shots.

    Episodes are sampled once at the largest shot count and truncated, so
    differences between rows come from support size alone.
    """
    if not shots or any(s < 1 for s in shots):
        raise ValidationError("shots must be a non-empty list of positive ints")
    _, params, head, _, _ = unpack_state(ckpt)
    tcfg = ckpt.config.get("train", {})
    kind = tcfg.get("head", "ridge")
    convstep_lr = tcfg.get("convstep_lr", 0.001)
    support_cap = tcfg.get("support_px_cap")
    max_shot = max(shots)
    reports = [
        EvalReport(config=ckpt.config, split=split, k=k, n_shot=s, q=q, num_tasks=num_tasks)
        for s in shots
    ]
    t0 = time.perf_counter()
    for t in range(num_tasks):
        es = derive_seed(seed, "task", t)
        episode = sample_episode(ds, split, k, max_shot, q, es)
        for s, rep in zip(shots, reports):
            sub = _truncate_support(episode, s) if s < max_shot else episode
            rep.tasks.append(
                evaluate_task(params, head, kind, sub, convstep_lr=convstep_lr, task_seed=es,
                              support_cap=support_cap, include_background=include_background)
            )
    wall = time.perf_counter() - t0
    for rep in reports:
        rep.wall_clock_s = wall / len(reports)
        rep.finalize()
    return ShotSweep(shots=list(shots), reports=reports)
