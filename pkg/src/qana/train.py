"""Training loop, evaluation metrics, and last-layer fine-tuning.

Optimization is plain Adam on softmax cross-entropy. Each epoch reshuffles
from a dedicated stage RNG and optionally re-augments every training sample
with its own per-(epoch, index) stream, so runs are bit-reproducible for a
given seed regardless of batch parallelism.
"""

from dataclasses import dataclass, field

import numpy as np

from . import arch, data, ops
from .errors import ConfigError, TrainingError
from .rng import sample_rng, stage_rng


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0,1)")


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean CE over the batch. Returns (loss, dlogits)."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    d = softmax(z)
    d[np.arange(n), labels] -= 1.0
    return loss, (d / n).astype(logits.dtype)


class Adam:
    """Standard Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(params[name], dtype=np.float64)
                self.m[name] = m
                self.v[name] = np.zeros_like(m)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            params[name] = (params[name]
                            - scale * m / (np.sqrt(v) + self.eps)).astype(params[name].dtype)


def _to_batch(samples):
    x = np.stack([s.pixels for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def forward_logits(model, params, x, batch_size=64, capture_layer=None):
    """Inference-mode logits in batches; optionally also one captured layer."""
    outs = []
    caps = []
    for i in range(0, len(x), batch_size):
        cap = {} if capture_layer else None
        logits, _, _ = arch.model_forward(model, params, x[i : i + batch_size],
                                          mode="infer", capture=cap)
        outs.append(logits)
        if capture_layer:
            caps.append(cap[capture_layer])
    logits = np.concatenate(outs) if outs else np.zeros((0, model.config.num_classes))
    if capture_layer:
        return logits, np.concatenate(caps)
    return logits


def train(model, params, train_samples, cfg: TrainConfig, val_samples=None,
          augment_cfg=None):
    """Optimize params in place. Returns a per-epoch history list."""
    if not train_samples:
        raise TrainingError("no training samples")
    if augment_cfg is None:
        augment_cfg = data.AugmentConfig(seed=cfg.seed)
    rng = stage_rng(cfg.seed, "train")
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    n = len(train_samples)
    history = []
    for epoch in range(cfg.epochs):
        if cfg.augment:
            epoch_samples = [
                data.augment(s, augment_cfg, sample_rng(cfg.seed, "augment",
                                                        epoch * n + i))
                for i, s in enumerate(train_samples)
            ]
        else:
            epoch_samples = train_samples
        x, y = _to_batch(epoch_samples)
        perm = rng.permutation(n)
        x, y = x[perm], y[perm]

        losses = []
        correct = 0
        for i in range(0, n, cfg.batch_size):
            xb, yb = x[i : i + cfg.batch_size], y[i : i + cfg.batch_size]
            logits, caches, updates = arch.model_forward(
                model, params, xb, mode="train", rng=rng, want_caches=True)
            loss, dlogits = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"training diverged: non-finite loss at epoch {epoch} step {i}")
            grads = arch.model_backward(model, params, caches, dlogits)
            opt.step(params, grads)
            params.update(updates)
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == yb).sum())

        entry = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": correct / n,
        }
        if val_samples:
            xv, yv = _to_batch(val_samples)
            logits = forward_logits(model, params, xv)
            entry["val_acc"] = float(np.mean(logits.argmax(axis=1) == yv))
        history.append(entry)
    return history


# ====== metrics ======

@dataclass
class MetricsReport:
    confusion: np.ndarray  # [K,K] rows true, cols predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: np.ndarray  # per-class hit rate (correct_c / count_c)
    auc: np.ndarray  # one-vs-rest, NaN when a class is absent
    macro_precision: float = field(init=False)
    macro_recall: float = field(init=False)
    macro_f1: float = field(init=False)
    macro_accuracy: float = field(init=False)
    macro_auc: float = field(init=False)
    top1: float = field(init=False)

    def __post_init__(self):
        self.macro_precision = float(np.mean(self.precision))
        self.macro_recall = float(np.mean(self.recall))
        self.macro_f1 = float(np.mean(self.f1))
        self.macro_accuracy = float(np.mean(self.accuracy))
        present = ~np.isnan(self.auc)
        self.macro_auc = float(np.mean(self.auc[present])) if present.any() else float("nan")
        total = self.confusion.sum()
        self.top1 = float(np.trace(self.confusion) / total) if total else 0.0


def rank_auc(scores, positives):
    """One-vs-rest AUC via average ranks (ties contribute half)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[positives].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics_from_scores(probs, labels, num_classes):
    """Confusion-matrix metrics plus per-class rank AUC from probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = probs.argmax(axis=1)
    k = num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1

    tp = np.diag(confusion).astype(np.float64)
    pred_totals = confusion.sum(axis=0).astype(np.float64)
    true_totals = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_totals > 0, tp / pred_totals, 0.0)
        recall = np.where(true_totals > 0, tp / true_totals, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
        accuracy = np.where(true_totals > 0, tp / true_totals, 0.0)
    auc = np.array([rank_auc(probs[:, c], labels == c) for c in range(k)])
    return MetricsReport(confusion, precision, recall, f1, accuracy, auc)


def evaluate(model, params, samples, batch_size=64) -> MetricsReport:
    if not samples:
        raise TrainingError("no samples to evaluate")
    x, y = _to_batch(samples)
    logits = forward_logits(model, params, x, batch_size)
    return metrics_from_scores(softmax(logits), y, model.config.num_classes)


# ====== last-layer fine-tuning ======

FINETUNE_PARAMS = ("classifier.w", "classifier.b")


def incremental_finetune(model, params, samples, cfg: TrainConfig):
    """Retrain only the classifier on frozen features. Mutates just those params.

    The rest of the network runs once in inference mode to produce features,
    so every non-classifier parameter (including BN running stats) is untouched.
    """
    if not samples:
        raise TrainingError("no samples to fine-tune on")
    x, y = _to_batch(samples)
    _, feats = forward_logits(model, params, x, capture_layer="flatten")

    rng = stage_rng(cfg.seed, "train")
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    n = len(samples)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        fx, fy = feats[perm], y[perm]
        losses = []
        correct = 0
        for i in range(0, n, cfg.batch_size):
            fb, yb = fx[i : i + cfg.batch_size], fy[i : i + cfg.batch_size]
            logits, cache = ops.dense(fb, params["classifier.w"], params["classifier.b"])
            loss, dlogits = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"fine-tuning diverged: non-finite loss at epoch {epoch}")
            _, dw, db = ops.dense_backward(dlogits, cache)
            opt.step(params, {"classifier.w": dw, "classifier.b": db})
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == yb).sum())
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "train_acc": correct / n})
    return history
