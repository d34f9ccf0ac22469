"""Loss, optimizer, clip-level metrics and the training loop."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .network import SdcnConfig, SdcnModel, init_model, model_backward, model_forward, predict
from .tensor import ShapeError, load_sgt, pad2d

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. only one class present)."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 20
    patience: int | None = None  # stop after this many epochs without a better clip AUC
    seed: int = 0
    train_fraction: float = 0.8
    threshold: float = 0.5

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


# --- loss and optimizer ------------------------------------------------------


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``probs``.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs only. The
    gradient uses the unclamped values, so once multiplied by the sigmoid
    derivative p(1-p) it becomes (p - y)/N and stays informative when the
    network saturates; a clamped gradient would vanish there and stall Adam.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"{p.size} probabilities for {y.size} labels")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    n = p.size
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = (p - y) / np.maximum(p * (1 - p), np.finfo(np.float64).tiny) / n
    return float(loss), grad


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        p -= (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.dtype)
    return state


# --- clip aggregation and metrics ---------------------------------------------


@dataclass
class ClipScore:
    clip_id: str
    label: int
    segment_probs: list[float]
    clip_prob: float


def aggregate_clip(segment_probs: Sequence[float]) -> float:
    """Clip probability = the largest segment probability."""
    probs = np.asarray(segment_probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("cannot aggregate an empty list of segment probabilities")
    if np.any((probs < 0) | (probs > 1)) or np.any(np.isnan(probs)):
        raise ValueError("segment probabilities must lie in [0, 1]")
    return float(probs.max())


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic.

    Ties count one half, which average ranks give for free.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative example")
    ranks = rankdata(s)  # average ranks over ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def sensitivity(clip_scores: Iterable[ClipScore], threshold: float = 0.5) -> float:
    """Fraction of preictal clips whose clip probability reaches ``threshold``."""
    positives = [c.clip_prob for c in clip_scores if c.label == 1]
    if not positives:
        raise MetricError("sensitivity needs at least one preictal clip")
    return float(np.mean(np.asarray(positives) >= threshold))


def score_clips(probs: np.ndarray, labels: np.ndarray, clip_ids: Sequence[str]) -> list[ClipScore]:
    """Group segment probabilities by clip (first-seen order) and max-aggregate."""
    groups: dict[str, list[int]] = {}
    for i, cid in enumerate(clip_ids):
        groups.setdefault(cid, []).append(i)
    scores = []
    for cid, idx in groups.items():
        seg = [float(probs[i]) for i in idx]
        scores.append(ClipScore(cid, int(labels[idx[0]]), seg, aggregate_clip(seg)))
    return scores


# --- data --------------------------------------------------------------------


@dataclass
class SegmentSet:
    x: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int
    clip_ids: list[str]
    segment_index: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, keep: np.ndarray) -> "SegmentSet":
        keep = np.asarray(keep)
        return SegmentSet(
            self.x[keep], self.labels[keep], [self.clip_ids[i] for i in keep], self.segment_index[keep]
        )


def read_manifest(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def load_segments(rows: Sequence[dict], base_dir: str | os.PathLike, height: int | None = None) -> SegmentSet:
    """Load the ``.sgt`` tensors a manifest points at, in manifest order.

    When ``height`` exceeds the stored number of frequency rows by an even
    amount, rows are zero-padded symmetrically to reach it.
    """
    if not rows:
        raise ValueError("manifest is empty")
    base = Path(base_dir)
    xs = []
    for row in rows:
        x = load_sgt(base / row["sgt_path"])
        if height is not None and x.shape[2] != height:
            extra = height - x.shape[2]
            if extra < 0 or extra % 2:
                raise ShapeError(f"cannot pad {x.shape[2]} frequency rows to {height}")
            x = pad2d(x, extra // 2, 0)
        xs.append(x[0])
    return SegmentSet(
        np.stack(xs),
        np.array([int(r["label"]) for r in rows]),
        [str(r["clip_id"]) for r in rows],
        np.array([int(r["segment_index"]) for r in rows]),
    )


def split_by_clip(
    clip_labels: dict[str, int], train_fraction: float, seed: int
) -> tuple[list[str], list[str]]:
    """Stratified train/validation split of clip ids; a clip never straddles both."""
    rng = np.random.default_rng([seed, 0x5EED])
    train, val = [], []
    for label in (0, 1):
        ids = sorted(c for c, y in clip_labels.items() if y == label)
        if not ids:
            continue
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_train = int(round(train_fraction * len(ids)))
        n_train = min(max(n_train, 1), len(ids) - 1) if len(ids) > 1 else 1
        train += ids[:n_train]
        val += ids[n_train:]
    return sorted(train), sorted(val)


# --- training ----------------------------------------------------------------


def evaluate(
    model: SdcnModel, data: SegmentSet, batch_size: int = 16, threshold: float = 0.5
) -> dict:
    probs = predict(model, data.x, batch_size)
    clips = score_clips(probs, data.labels, data.clip_ids)
    return {
        "seg_auc": auc(probs, data.labels),
        "clip_auc": auc([c.clip_prob for c in clips], [c.label for c in clips]),
        "sens": sensitivity(clips, threshold),
        "clip_scores": clips,
        "segment_probs": probs,
    }


@dataclass
class TrainResult:
    model: SdcnModel
    history: list[dict]
    train_clips: list[str]
    val_clips: list[str]
    best_epoch: int


def train_loop(
    data: SegmentSet,
    model_cfg: SdcnConfig,
    train_cfg: TrainConfig,
    metrics_path: str | os.PathLike | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Segment-level Adam training with clip-level validation.

    Returns the parameters from the epoch with the best validation clip AUC;
    ties go to the lower validation loss, then to the earlier epoch. With
    ``patience`` set, training stops once the clip AUC has not strictly
    improved for that many epochs. When ``metrics_path`` is given, one JSON
    line per epoch is appended to it.
    """
    train_cfg.validate()
    clip_labels = dict(zip(data.clip_ids, data.labels.tolist()))
    train_ids, val_ids = split_by_clip(clip_labels, train_cfg.train_fraction, train_cfg.seed)
    if not train_ids or not val_ids:
        raise ValueError("train/validation split left one side empty; add more clips")
    in_train = np.array([c in set(train_ids) for c in data.clip_ids])
    train_set = data.subset(np.flatnonzero(in_train))
    val_set = data.subset(np.flatnonzero(~in_train))
    for name, part in (("training", train_set), ("validation", val_set)):
        if len(set(part.labels.tolist())) < 2:
            raise MetricError(f"{name} split contains a single class")

    model = init_model(model_cfg, train_cfg.seed)
    state = AdamState()
    history: list[dict] = []
    best: SdcnModel | None = None
    best_key: tuple[float, float] = (-np.inf, -np.inf)
    best_auc, best_epoch, stale = -np.inf, 0, 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = np.sort(order[start : start + train_cfg.batch_size])
            probs, cache = model_forward(train_set.x[idx], model)
            loss, grad = bce_loss(probs, train_set.labels[idx])
            grads = model_backward(cache, grad, model)
            adam_step(model.params, grads, state, train_cfg)
            model.bump()
            total += loss * len(idx)
        metrics = evaluate(model, val_set, train_cfg.batch_size, train_cfg.threshold)
        record = {
            "epoch": epoch,
            "train_loss": total / len(train_set),
            "val_loss": bce_loss(metrics["segment_probs"], val_set.labels)[0],
            "seg_auc": metrics["seg_auc"],
            "clip_auc": metrics["clip_auc"],
            "sens": metrics["sens"],
        }
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(record)
        key = (record["clip_auc"], -record["val_loss"])
        if best is None or key > best_key:
            best_key, best_epoch, best = key, epoch, model.copy()
        if record["clip_auc"] > best_auc:
            best_auc, stale = record["clip_auc"], 0
        else:
            stale += 1
        if train_cfg.patience is not None and stale >= train_cfg.patience:
            break

    assert best is not None
    best.meta = {
        "train": asdict(train_cfg),
        "train_clips": train_ids,
        "val_clips": val_ids,
        "best_epoch": best_epoch,
        "best_metrics": history[best_epoch - 1],
    }
    return TrainResult(best, history, train_ids, val_ids, best_epoch)
