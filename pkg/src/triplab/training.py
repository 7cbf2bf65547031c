"""Losses, class weighting, augmentation, schedules and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from triplab.metrics import evaluate
from triplab.model import ModelConfig, TripletModel, build_model, init_weights, predict, to_batch
from triplab.vocab import ClassIndex, Dataset, ValidityMask, build_validity_mask

log = logging.getLogger(__name__)

LR_GROUPS = ("subnets", "backbone", "space")
TASKS = ("I", "V", "T", "IVT")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, last_good: int):
        self.epoch = epoch
        self.last_good = last_good
        super().__init__(f"loss became NaN at epoch {epoch}; last good epoch {last_good}")


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 3
    batch_size: int = 16
    lr_subnets: float = 1e-3
    lr_backbone: float = 1e-4
    lr_space: float = 1e-5
    decay_rate: float = 0.95
    decay_steps: int = 0
    weight_decay: float = 1e-5
    momentum: float = 0.9
    grad_clip: float = 0.0
    aug_rotate: bool = True
    aug_flip: bool = True
    aug_patch: bool = True
    aug_prob: float = 0.5
    class_weighting: bool = True
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if min(self.lr_subnets, self.lr_backbone, self.lr_space) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")

    def initial_lr(self, group: str) -> float:
        return {"subnets": self.lr_subnets, "backbone": self.lr_backbone, "space": self.lr_space}[group]


@dataclass(frozen=True)
class ClassWeights:
    I: np.ndarray
    V: np.ndarray
    T: np.ndarray
    IVT: np.ndarray

    def __post_init__(self):
        for k in TASKS:
            w = getattr(self, k)
            if not (np.all(np.isfinite(w)) and np.all(w > 0)):
                raise ValueError(f"class weights for {k} must be finite and positive")

    @classmethod
    def uniform(cls, m: int, n: int, p: int, c: int) -> ClassWeights:
        return cls(np.ones(m), np.ones(n), np.ones(p), np.ones(c))


def compute_class_weights(counts, total: int, clip: tuple[float, float] = (0.1, 10.0)) -> np.ndarray:
    """Median-frequency balancing: ``median(freq) / freq``, clipped.

    Frequencies of unseen classes are floored at ``1 / total``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if total <= 0:
        raise ValueError("total must be positive")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    if not np.any(counts > 0):
        raise ValueError("all class counts are zero")
    freq = np.maximum(counts / total, 1.0 / total)
    return np.clip(np.median(freq) / freq, *clip)


def dataset_class_weights(ds: Dataset, classes: ClassIndex) -> ClassWeights:
    hot = ds.multi_hot(classes)
    total = len(ds)

    def safe(counts):
        if not np.any(counts > 0):
            return np.ones(len(counts))
        return compute_class_weights(counts, total)

    return ClassWeights(*(safe(hot[k].sum(axis=0)) for k in TASKS))


def weighted_bce_with_logits(logits: torch.Tensor, labels: torch.Tensor, weights=None) -> torch.Tensor:
    """Mean of ``w_c * BCE(sigmoid(x), y)`` in the log-sum-exp stable form."""
    if logits.shape != labels.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(labels.shape)}")
    per = torch.clamp(logits, min=0) - logits * labels + torch.log1p(torch.exp(-logits.abs()))
    if weights is not None:
        w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
        per = per * w
    return per.mean()


def weight_decay_term(params, coef: float) -> torch.Tensor:
    params = list(params)
    if not params or coef == 0:
        return torch.zeros(())
    return coef * sum((p * p).sum() for p in params)


def total_loss(model: TripletModel, heads: dict, labels: dict, epoch: int, cfg: TrainConfig,
               weights: ClassWeights | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    """Scheduled sum of task losses plus L2 decay.

    Before ``warmup_epochs`` only the instrument loss (and decay over the
    backbone and instrument branch) is active; afterwards all four task
    losses count with unit weight. Models without component heads always
    use the triplet loss alone.
    """
    def w(task):
        return None if weights is None else getattr(weights, task)

    comps: dict[str, torch.Tensor] = {}
    has_components = "I" in heads
    in_warmup = has_components and epoch < cfg.warmup_epochs
    for task in TASKS:
        if task == "IVT":
            key = "ivt"
        elif has_components:
            key = task
        else:
            continue
        comps[task] = weighted_bce_with_logits(heads[key], labels[task], w(task))
    if in_warmup:
        active = ["I"]
        decay_params = model.warmup_parameters()
    else:
        active = list(comps)
        decay_params = [p for p in model.parameters() if p.requires_grad]
    loss = sum(comps[k] for k in active)
    decay = weight_decay_term(decay_params, cfg.weight_decay)
    loss = loss + decay
    report = {f"L_{k}": float(v.detach()) for k, v in comps.items()}
    report["L_WD"] = float(decay.detach())
    report["active"] = active
    return loss, report


def augment(image: np.ndarray, annotations, rng: np.random.Generator, p_rotate: float = 0.5,
            p_flip: float = 0.5, p_patch: float = 0.5, max_angle: float = 15.0,
            max_patch_frac: float = 0.10):
    """Label-preserving rotation / horizontal flip / patch masking.

    Every draw is taken from ``rng`` whether or not the augmentation fires,
    so the random stream does not depend on earlier outcomes.
    """
    img = np.asarray(image)
    H, W = img.shape[:2]
    u_rot, u_flip, u_patch = rng.random(3)
    angle = rng.uniform(-max_angle, max_angle)
    frac = rng.uniform(0.02, max_patch_frac)
    aspect = math.exp(rng.uniform(-0.7, 0.7))
    cy, cx = rng.random(2)
    if u_rot < p_rotate:
        img = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
        img = np.clip(img, 0.0, 1.0)
    if u_flip < p_flip:
        img = img[:, ::-1]
    if u_patch < p_patch:
        ph = max(1, min(H, int(math.sqrt(frac * H * W / aspect))))
        pw = max(1, min(W, int(frac * H * W / ph)))
        y0 = int(cy * (H - ph + 1))
        x0 = int(cx * (W - pw + 1))
        img = img.copy()
        img[y0:y0 + ph, x0:x0 + pw] = 0
    return np.ascontiguousarray(img, dtype=np.asarray(image).dtype), annotations


def lr_schedule(step: int, group: str, cfg: TrainConfig, decay_steps: int | None = None) -> float:
    """Exponential decay ``lr0 * decay_rate ** (step / decay_steps)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    steps = decay_steps or cfg.decay_steps or 1
    return cfg.initial_lr(group) * cfg.decay_rate ** (step / steps)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict
    val: dict
    lr: dict
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    path: Path | None = None
    timings: list[float] = field(default_factory=list)

    def append(self, rec: EpochRecord, wall: float) -> None:
        self.records.append(rec)
        self.timings.append(wall)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


@dataclass
class TrainResult:
    model: TripletModel
    log: TrainLog
    best_epoch: int
    best_score: float
    weights: ClassWeights


def _labels_for(hot: dict, idx: np.ndarray) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(hot[k][idx]) for k in TASKS}


def _sample_rng(seed: int, epoch: int, frame: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, frame]))


def _summary(report) -> dict:
    return {"AP_I": _num(report.mean_ap_i), "AP_IV": _num(report.ap_iv),
            "AP_IT": _num(report.ap_it), "AP_IVT": _num(report.ap_ivt)}


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else round(float(x), 10)


def train(kind: str, train_ds: Dataset, val_ds: Dataset, train_images: np.ndarray, val_images: np.ndarray,
          cfg: TrainConfig, model_cfg: ModelConfig | None = None, mask: ValidityMask | None = None,
          log_path: str | Path | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train one model and keep the parameters with the best validation AP_IVT."""
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and val datasets must be non-empty")
    if train_ds.vocab != val_ds.vocab:
        raise ValueError("train and val vocabularies differ")
    if len(train_images) != len(train_ds) or len(val_images) != len(val_ds):
        raise ValueError("images and annotations are not aligned")
    mask = mask or build_validity_mask(train_ds, train_ds.vocab)
    torch.manual_seed(cfg.seed)
    model = build_model(kind, train_ds.vocab, mask, model_cfg)
    init_weights(model, cfg.seed)
    classes = model.classes
    hot = train_ds.multi_hot(classes)
    weights = dataset_class_weights(train_ds, classes) if cfg.class_weighting else None
    groups = model.parameter_groups()
    opt = torch.optim.SGD(
        [{"params": groups[g], "name": g, "lr": cfg.initial_lr(g)} for g in LR_GROUPS if groups[g]],
        lr=cfg.lr_subnets, momentum=cfg.momentum)
    steps_per_epoch = -(-len(train_ds) // cfg.batch_size)
    decay_steps = cfg.decay_steps or steps_per_epoch
    if log_path is not None:
        log_path = Path(log_path)
        log_path.write_text("", encoding="utf-8")
    tlog = TrainLog(path=log_path)
    best_state, best_score, best_epoch, last_good = None, -math.inf, -1, -1
    step = 0
    augmenting = cfg.aug_rotate or cfg.aug_flip or cfg.aug_patch
    probs = {k: (cfg.aug_prob if on else 0.0) for k, on in
             (("p_rotate", cfg.aug_rotate), ("p_flip", cfg.aug_flip), ("p_patch", cfg.aug_patch))}
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 2**20])).permutation(len(train_ds))
        sums: dict[str, float] = {}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if augmenting:
                batch = np.stack([augment(train_images[k], None, _sample_rng(cfg.seed, epoch, int(k)), **probs)[0]
                                  for k in idx])
            else:
                batch = train_images[idx]
            lr = {}
            for g in opt.param_groups:
                g["lr"] = lr[g["name"]] = lr_schedule(step, g["name"], cfg, decay_steps)
            heads = model(to_batch(batch))
            loss, rep = total_loss(model, heads, _labels_for(hot, idx), epoch, cfg, weights)
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            for k, v in rep.items():
                if k != "active":
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
        losses = {k: round(v / len(train_ds), 10) for k, v in sums.items()}
        losses["active"] = rep["active"]
        preds = predict(model, val_images)
        val = _summary(evaluate(preds["probs"], val_ds))
        rec = EpochRecord(epoch, losses, val, {k: float(v) for k, v in lr.items()}, cfg.seed)
        tlog.append(rec, time.perf_counter() - t0)
        last_good = epoch
        score = val["AP_IVT"] if val["AP_IVT"] is not None else -math.inf
        eligible = kind == "naive" or epoch >= cfg.warmup_epochs
        if best_state is None or (eligible and (score > best_score or best_epoch < cfg.warmup_epochs)):
            best_score, best_epoch = score, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.info("epoch %d loss %s val %s", epoch, losses, val)
        if on_epoch is not None:
            on_epoch(rec)
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, tlog, best_epoch, best_score,
                       weights or ClassWeights.uniform(*train_ds.vocab.shape, len(classes)))
