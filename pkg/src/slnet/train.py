"""Losses, SGD with cosine decay, EMA shadow weights, and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Param, Tensor, apply_op, backward, Tape, _data


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LossConfig:
    kind: str = "ce"               # ce | wce | focal
    label_smoothing: float = 0.0
    gamma: float = 2.0
    class_freqs: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("ce", "wce", "focal"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.kind == "wce":
            if self.class_freqs is None or np.any(np.asarray(self.class_freqs) <= 0):
                raise ValueError("wce requires strictly positive class_freqs")


@dataclass
class OptimConfig:
    lr0: float = 0.1
    epochs: int = 60
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_rho: float = 0.999
    lr_min: float = 0.0
    batch_size: int = 25
    use_ema: bool = True


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, targets, label_smoothing: float = 0.0,
                  weights: np.ndarray | None = None) -> Tensor:
    """Softmax cross-entropy with label smoothing and optional class weights.

    Smoothing puts 1-eps on the true class and eps/(C-1) elsewhere. With
    weights, each sample's term is scaled by w[target] and the sum divided
    by the total applied weight, so balanced batches keep their loss scale.
    """
    ld = _data(logits)
    t = np.asarray(targets)
    n, c = ld.shape
    if t.shape != (n,):
        raise ValueError(f"targets shape {t.shape} does not match logits {ld.shape}")
    if t.min() < 0 or t.max() >= c:
        raise ValueError("target class index out of range")
    logp = _log_softmax(ld)
    q = np.full((n, c), label_smoothing / (c - 1) if c > 1 else 0.0, dtype=ld.dtype)
    q[np.arange(n), t] = 1.0 - label_smoothing
    per_sample = -(q * logp).sum(axis=1)
    if weights is not None:
        w = np.asarray(weights, dtype=ld.dtype)[t]
        denom = w.sum()
    else:
        w = np.ones(n, dtype=ld.dtype)
        denom = float(n)
    loss = float((w * per_sample).sum() / denom)
    p = np.exp(logp)

    def bwd(g):
        gs = float(np.ravel(g)[0])
        coeff = (w / denom)[:, None]
        return (gs * coeff * (p - q),)

    return apply_op(np.asarray(loss, dtype=ld.dtype), (logits,), bwd)


def class_weights(freqs) -> np.ndarray:
    """Inverse-square-root frequency weights, rescaled to mean 1."""
    f = np.asarray(freqs, dtype=np.float64)
    if np.any(f <= 0):
        raise ValueError("class frequencies must be strictly positive")
    w = 1.0 / np.sqrt(f)
    return w * (len(w) / w.sum())


def focal_loss(logits, targets, gamma: float = 2.0) -> Tensor:
    """Mean of (1 - p_t)^gamma * (-log p_t) over samples."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    ld = _data(logits)
    t = np.asarray(targets)
    n, c = ld.shape
    if t.min() < 0 or t.max() >= c:
        raise ValueError("target class index out of range")
    logp = _log_softmax(ld)
    p = np.exp(logp)
    idx = np.arange(n)
    log_pt = logp[idx, t]
    pt = p[idx, t]
    focal = (1.0 - pt) ** gamma
    loss = float((focal * -log_pt).mean())

    def bwd(g):
        # d/dpt [(1-pt)^g * (-ln pt)] = g*(1-pt)^(g-1)*ln(pt) - (1-pt)^g / pt
        if gamma == 0.0:
            dl_dpt = -1.0 / pt
        else:
            dl_dpt = gamma * (1.0 - pt) ** (gamma - 1.0) * log_pt - focal / pt
        onehot = np.zeros_like(p)
        onehot[idx, t] = 1.0
        dpt_dz = pt[:, None] * (onehot - p)
        return (float(np.ravel(g)[0]) / n * dl_dpt[:, None] * dpt_dz,)

    return apply_op(np.asarray(loss, dtype=ld.dtype), (logits,), bwd)


def make_loss(cfg: LossConfig):
    """Bind a LossConfig to a (logits, targets) -> scalar Tensor callable."""
    if cfg.kind == "focal":
        return lambda logits, targets: focal_loss(logits, targets, cfg.gamma)
    weights = class_weights(cfg.class_freqs) if cfg.kind == "wce" else None
    return lambda logits, targets: cross_entropy(
        logits, targets, cfg.label_smoothing, weights)


def cosine_lr(epoch: int, cfg: OptimConfig) -> float:
    """Half-cosine decay from lr0 at epoch 0 to lr_min at the final epoch."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError("epoch outside the schedule range")
    span = cfg.lr0 - cfg.lr_min
    return cfg.lr_min + span * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


class SGD:
    """Momentum SGD: v <- momentum*v + grad + wd*param; param <- param - lr*v."""

    def __init__(self, params: list[Param], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad.data
            if self.weight_decay:
                v += self.weight_decay * p.value.data
            p.value.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params: list[Param], lr: float, momentum: float,
             weight_decay: float, velocity: list[np.ndarray]) -> None:
    """One functional optimizer step; velocity is updated in place."""
    for p, v in zip(params, velocity):
        v *= momentum
        v += p.grad.data
        if weight_decay:
            v += weight_decay * p.value.data
        p.value.data -= lr * v


class Ema:
    """Exponential moving average of parameter values."""

    def __init__(self, params: list[Param], rho: float = 0.999):
        self.params = list(params)
        self.rho = rho
        self.shadow = [p.value.data.copy() for p in self.params]
        self._backup = None

    def update(self) -> None:
        for s, p in zip(self.shadow, self.params):
            ema_update(s, p.value.data, self.rho)

    def swap_in(self) -> None:
        """Load shadow values into the params (backing up the raw ones)."""
        self._backup = [p.value.data.copy() for p in self.params]
        for p, s in zip(self.params, self.shadow):
            p.value.data[...] = s

    def swap_out(self) -> None:
        for p, b in zip(self.params, self._backup):
            p.value.data[...] = b
        self._backup = None


def ema_update(shadow: np.ndarray, param: np.ndarray, rho: float) -> None:
    """shadow <- rho*shadow + (1-rho)*param, elementwise in place."""
    shadow *= rho
    shadow += (1.0 - rho) * param


class ConfusionMatrix:
    """C x C counts, row = true class, column = predicted."""

    def __init__(self, n_classes: int):
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, truth, pred) -> None:
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        np.add.at(self.counts, (truth, pred), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.counts.shape[0])
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def metrics(conf: ConfusionMatrix) -> tuple[float, float]:
    """(overall accuracy, mean class accuracy).

    Classes with no true samples in the split are skipped by mAcc rather
    than scored as zero.
    """
    counts = conf.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    oa = float(np.trace(counts) / total)
    row_sums = counts.sum(axis=1)
    present = row_sums > 0
    recall = np.diag(counts)[present] / row_sums[present]
    return oa, float(recall.mean())


def iou_metrics(per_point_preds, per_point_truth, shape_categories,
                part_ranges: dict[int, tuple[int, int]]) -> tuple[float, float]:
    """Instance- and class-average IoU for part segmentation.

    Each shape is scored as the mean IoU over the parts of its category
    (empty union counts as 1). ins-IoU averages over shapes, cls-IoU over
    the per-category means.
    """
    shape_ious: dict[int, list[float]] = {}
    all_ious = []
    for pred, truth, cat in zip(per_point_preds, per_point_truth, shape_categories):
        cat = int(cat)
        if cat not in part_ranges:
            raise ValueError(f"unknown shape category {cat}")
        lo, hi = part_ranges[cat]
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        ious = []
        for part in range(lo, hi):
            p = pred == part
            t = truth == part
            union = np.logical_or(p, t).sum()
            if union == 0:
                ious.append(1.0)
            else:
                ious.append(np.logical_and(p, t).sum() / union)
        iou = float(np.mean(ious))
        all_ious.append(iou)
        shape_ious.setdefault(cat, []).append(iou)
    ins = float(np.mean(all_ious))
    cls = float(np.mean([np.mean(v) for v in shape_ious.values()]))
    return ins, cls


# ---------------------------------------------------------------------------
# training loop

def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def evaluate(model, clouds: np.ndarray, labels: np.ndarray,
             batch_size: int = 32) -> ConfusionMatrix:
    """Eval-mode confusion matrix over a labeled set of clouds."""
    was_training = model.training
    model.eval()
    conf = ConfusionMatrix(model.config.n_classes)
    try:
        for lo in range(0, len(clouds), batch_size):
            batch = clouds[lo:lo + batch_size]
            logits = model.forward(batch, sample_seed=0)
            conf.update(labels[lo:lo + batch_size], logits.data.argmax(axis=1))
    finally:
        model.train(was_training)
    return conf


@dataclass
class TrainResult:
    log_lines: list[str]
    ema: Ema | None


def train_classifier(model, train_clouds: np.ndarray, train_labels: np.ndarray,
                     optim_cfg: OptimConfig, loss_cfg: LossConfig | None = None,
                     seed: int = 0, log=None) -> TrainResult:
    """SGD + cosine decay + EMA over a fixed array of training clouds.

    Emits one machine-parseable log line per epoch (epoch, lr, loss, train
    OA). Returns the collected lines plus the EMA shadow; raises
    NumericError on a NaN loss.
    """
    import gc

    loss_cfg = loss_cfg or LossConfig()
    loss_fn = make_loss(loss_cfg)
    params = model.params()
    opt = SGD(params, momentum=optim_cfg.momentum,
              weight_decay=optim_cfg.weight_decay)
    ema = Ema(params, rho=optim_cfg.ema_rho) if optim_cfg.use_ema else None
    rng = np.random.default_rng(seed)
    n = len(train_clouds)
    plan = None
    if model.config.sampling == "fps":
        from .backbone import precompute_geometry

        plan = precompute_geometry(model.config, train_clouds)
    lines = []
    model.train()
    step = 0
    # tensors free by refcount; cycle collection only adds pauses here
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for epoch in range(optim_cfg.epochs):
            lr = cosine_lr(epoch, optim_cfg)
            order = rng.permutation(n)
            epoch_loss = 0.0
            correct = 0
            for lo in range(0, n, optim_cfg.batch_size):
                idx = order[lo:lo + optim_cfg.batch_size]
                batch = train_clouds[idx]
                targets = train_labels[idx]
                batch_plan = ([(sel[idx], nbr[idx]) for sel, nbr in plan]
                              if plan is not None else None)
                opt.zero_grad()
                with Tape() as tape:
                    logits = model.forward(batch, sample_seed=seed * 100003 + step,
                                           plan=batch_plan)
                    loss = loss_fn(logits, targets)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                backward(tape, loss)
                opt.step(lr)
                if ema is not None:
                    ema.update()
                epoch_loss += loss_val * len(idx)
                correct += int((logits.data.argmax(axis=1) == targets).sum())
                step += 1
            line = (f"epoch={epoch} lr={lr:.6f} loss={epoch_loss / n:.4f} "
                    f"oa={correct / n:.4f}")
            lines.append(line)
            if log is not None:
                log(line)
    finally:
        if gc_was_enabled:
            gc.enable()
            gc.collect()
    return TrainResult(log_lines=lines, ema=ema)
