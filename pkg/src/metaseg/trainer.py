"""Episodic meta-training of the embedding and head scalars.

Each episode: embed the support set, solve the inner problem (closed-form
ridge by default), score the query set, take the mean pixel cross-entropy,
and backpropagate through the whole chain including the solve. One Adam
step per ``meta_batch`` episodes (default 1). Per-episode sampling and
augmentation seeds are derived from (seed, epoch, index) alone, so a resumed
run replays exactly the episodes an uninterrupted run would see.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, set_default_dtype, softmax_cross_entropy
from .checkpoint import Checkpoint, pack_state, save_checkpoint, unpack_state
from .embed import EmbedConfig, build_embedding
from .episodes import Episode, SegDataset, augment_episode, sample_episode
from .errors import ValidationError
from .evaluation import evaluate_model
from .heads import RidgeHead
from .pipeline import HEAD_KINDS, episode_logits, flatten_labels, downsample_labels, lift_logits
from .util import derive_seed

logger = logging.getLogger("metaseg.trainer")

# Desk-scale embedding: same topology as the full preset, narrow blocks.
# The global block stays extra narrow so the replicated context informs the
# per-pixel features without swamping the local channels in the L2 fusion.
DESK_EMBED = EmbedConfig(block_channels=(16, 32, 32, 64, 16))


@dataclass(frozen=True)
class TrainConfig:
    k: int = 2
    n: int = 5
    q: int = 2
    episodes_per_epoch: int = 200
    epochs: int = 20
    lr: float = 0.001
    seed: int = 0
    precision: str = "f32"
    gc_branch_enabled: bool = True
    head: str = "ridge"
    augment: bool = True
    loss_resolution: str = "feature"
    meta_batch: int = 1
    clip_norm: Optional[float] = None
    convstep_lr: float = 0.001
    support_px_cap: Optional[int] = None  # per-class support pixel cap for the ridge solve
    eval_every: int = 0  # epochs between tracking evals; 0 disables
    eval_tasks: int = 50
    workers: int = 1

    def __post_init__(self):
        if self.episodes_per_epoch < 1 or self.epochs < 0:
            raise ValidationError("episodes_per_epoch must be >= 1 and epochs >= 0")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.precision not in ("f32", "f64"):
            raise ValidationError(f"unknown precision {self.precision!r}")
        if self.head not in HEAD_KINDS:
            raise ValidationError(f"unknown head {self.head!r}")
        if self.loss_resolution not in ("feature", "full"):
            raise ValidationError(f"unknown loss_resolution {self.loss_resolution!r}")
        if self.meta_batch < 1 or self.workers < 1:
            raise ValidationError("meta_batch and workers must be >= 1")


def meta_loss(logits: Tensor, query_labels: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy over every query pixel of the episode."""
    labels = np.asarray(query_labels).reshape(-1)
    if logits.shape[0] != labels.shape[0]:
        raise ValidationError(f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels")
    return softmax_cross_entropy(logits, labels)


def trainable_tensors(params, head: RidgeHead, head_kind: str) -> dict[str, Tensor]:
    """The meta-learned parameter set: embedding always, scalars for ridge only."""
    out = {f"embed.{name}": t for name, t in params.tensors.items()}
    if head_kind == "ridge":
        out.update(head.named())
    return out


def train_episode(params, head, episode: Episode, config: TrainConfig, mode: str = "train"):
    """One episode forward/backward; returns (loss value, grads by name)."""
    trainables = trainable_tensors(params, head, config.head)
    with Tape() as tape:
        for t in trainables.values():
            tape.watch(t)
        logits, query_feats, query_masks = episode_logits(
            params, head, config.head, episode, mode, convstep_lr=config.convstep_lr,
            support_cap=config.support_px_cap,
        )
        if config.loss_resolution == "full":
            n, h, w = query_masks.shape
            logits = lift_logits(logits, query_feats.n_images, query_feats.feat_h, query_feats.feat_w, h, w)
            labels = flatten_labels(query_masks)
        else:
            labels = flatten_labels(downsample_labels(query_masks))
        loss = meta_loss(logits, labels)
    grads = tape.backward(loss)
    return float(loss.data), {name: grads[t] for name, t in trainables.items()}


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    eval_miou: float = float("nan")


def _prepare_episode(ds: SegDataset, config: TrainConfig, epoch: int, index: int) -> Episode:
    episode = sample_episode(
        ds, "train", config.k, config.n, config.q, derive_seed(config.seed, "episode", epoch, index)
    )
    if config.augment:
        episode = augment_episode(episode, derive_seed(config.seed, "augment", epoch, index))
    return episode


def meta_train(
    ds: SegDataset,
    config: TrainConfig,
    embed: Optional[EmbedConfig] = None,
    out_dir: Optional[str] = None,
    resume: Optional[Checkpoint] = None,
) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Run episodic training; returns the final checkpoint and per-epoch metrics.

    With ``out_dir`` set, a checkpoint and a cumulative metrics.csv are
    written after every epoch. ``resume`` continues a run bit-exactly (the
    embedded config snapshot takes precedence over ``embed``).
    """
    if not ds.train_classes:
        raise ValidationError("dataset has no train split; call split_classes first")
    set_default_dtype(config.precision)
    config_echo = {"train": asdict(config)}
    if resume is not None:
        embed_cfg, params, head, adam, epochs_done = unpack_state(resume, lr=config.lr)
        if epochs_done >= config.epochs:
            logger.info("resume checkpoint already has %d epochs", epochs_done)
    else:
        embed_cfg = replace(embed or DESK_EMBED, gc_branch_enabled=config.gc_branch_enabled)
        params = build_embedding(embed_cfg, seed=derive_seed(config.seed, "init"))
        head = RidgeHead.create()
        adam = AdamState.create(trainable_tensors(params, head, config.head), lr=config.lr)
        epochs_done = 0

    out_path = Path(out_dir) if out_dir else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
    metrics: list[EpochMetrics] = []
    ckpt = pack_state(config_echo, embed_cfg, params, head, adam, epochs_done, config.seed)

    for epoch in range(epochs_done, config.epochs):
        losses = []
        acc: Optional[dict[str, np.ndarray]] = None
        acc_count = 0

        def flush():
            nonlocal acc, acc_count
            if acc_count == 0:
                return
            trainables = trainable_tensors(params, head, config.head)
            grads = {k: v / acc_count for k, v in acc.items()}
            adam_step(trainables, grads, adam, clip_norm=config.clip_norm)
            acc, acc_count = None, 0

        if config.workers > 1:
            pool = ThreadPoolExecutor(max_workers=config.workers)
            pending = [
                pool.submit(_prepare_episode, ds, config, epoch, i)
                for i in range(config.episodes_per_epoch)
            ]
            episodes = (f.result() for f in pending)  # consumed in submit order
        else:
            pool = None
            episodes = (_prepare_episode(ds, config, epoch, i) for i in range(config.episodes_per_epoch))

        for episode in episodes:
            loss, grads = train_episode(params, head, episode, config, mode="train")
            if not np.isfinite(loss):
                raise ValidationError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            if acc is None:
                acc = grads
                acc_count = 1
            else:
                for k in acc:
                    acc[k] = acc[k] + grads[k]
                acc_count += 1
            if acc_count >= config.meta_batch:
                flush()
        flush()
        if pool is not None:
            pool.shutdown()

        row = EpochMetrics(epoch=epoch, mean_loss=float(np.mean(losses)))
        if config.eval_every and (epoch + 1) % config.eval_every == 0 and ds.novel_classes:
            rep = evaluate_model(
                params, head, config.head, ds, split="novel", k=config.k, n=config.n, q=config.q,
                num_tasks=config.eval_tasks, seed=derive_seed(config.seed, "tracking_eval"),
                convstep_lr=config.convstep_lr, support_cap=config.support_px_cap,
            )
            row.eval_miou = rep.mean_miou
        metrics.append(row)
        logger.info("epoch %d: loss %.4f eval_miou %.4f", epoch, row.mean_loss, row.eval_miou)

        ckpt = pack_state(config_echo, embed_cfg, params, head, adam, epoch + 1, config.seed)
        if out_path:
            save_checkpoint(out_path / f"epoch_{epoch + 1:03d}.ckpt", ckpt)
            save_checkpoint(out_path / "latest.ckpt", ckpt)
            _write_metrics_csv(out_path / "metrics.csv", metrics)
    return ckpt, metrics


def _write_metrics_csv(path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w") as f:
        f.write("epoch,mean_loss,eval_miou\n")
        for m in metrics:
            miou = "" if np.isnan(m.eval_miou) else f"{m.eval_miou:.6f}"
            f.write(f"{m.epoch},{m.mean_loss:.6f},{miou}\n")
