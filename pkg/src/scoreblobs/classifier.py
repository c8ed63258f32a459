"""Desk-scale symbol classifier with entropy-based confidence.

A linear softmax head over hand-crafted features (downsampled intensities
plus a coarse gradient-orientation histogram) stands in for large
fine-tuned backbones; the train/predict/save surface is backbone-agnostic
so a heavier model can be slotted in behind the same contracts.

Training uses minibatch SGD on cross-entropy with a one-cycle learning-rate
schedule (linear warmup to the peak over the first 30% of scheduled steps,
then cosine annealing) and early stopping on validation loss.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .errors import DataError
from .imaging import AugmentConfig

logger = logging.getLogger(__name__)

EPSILON = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    """32x32 intensities in [0,1] + 8-bin gradient histogram on a 4x4 grid."""

    image_size: int = 32
    grid: int = 4
    orientations: int = 8

    @property
    def dim(self) -> int:
        return self.image_size * self.image_size + self.grid * self.grid * self.orientations

    def to_dict(self):
        return {"image_size": self.image_size, "grid": self.grid, "orientations": self.orientations}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["image_size"]), int(d["grid"]), int(d["orientations"]))


def extract_features(image, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Feature vector for one grayscale image (any size)."""
    small = imaging.resize(image, (cfg.image_size, cfg.image_size)).astype(np.float64) / 255.0
    gy, gx = np.gradient(small)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % (2.0 * np.pi)
    bins = np.minimum((ang / (2.0 * np.pi) * cfg.orientations).astype(int), cfg.orientations - 1)

    cell = cfg.image_size // cfg.grid
    hist = np.zeros((cfg.grid, cfg.grid, cfg.orientations))
    ys, xs = np.mgrid[0:cfg.image_size, 0:cfg.image_size]
    cell_r = np.minimum(ys // cell, cfg.grid - 1)
    cell_c = np.minimum(xs // cell, cfg.grid - 1)
    np.add.at(hist, (cell_r.ravel(), cell_c.ravel(), bins.ravel()), mag.ravel())
    norms = np.linalg.norm(hist, axis=2, keepdims=True)
    hist = hist / (norms + 1e-9)

    return np.concatenate([small.ravel(), hist.ravel()])


@dataclass
class TrainConfig:
    max_lr: float = 0.01
    epochs_max: int = 500
    patience: int = 20
    batch_size: int = 64
    momentum: float = 0.9
    warmup_frac: float = 0.3
    div_start: float = 25.0
    div_end: float = 1e4
    seed: int = 0

    def __post_init__(self):
        for name in ("max_lr", "epochs_max", "patience", "batch_size"):
            if getattr(self, name) <= 0:
                raise DataError(f"TrainConfig.{name} must be positive")

    def to_dict(self):
        return {
            "max_lr": self.max_lr, "epochs_max": self.epochs_max, "patience": self.patience,
            "batch_size": self.batch_size, "momentum": self.momentum, "warmup_frac": self.warmup_frac,
            "div_start": self.div_start, "div_end": self.div_end, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate at a given step of the schedule.

    Starts at max_lr/div_start, rises linearly to exactly max_lr at the end
    of the warmup span (warmup_frac of all scheduled steps), then cosine
    anneals down to max_lr/div_end at the final step.
    """
    if total_steps <= 1:
        return cfg.max_lr
    start = cfg.max_lr / cfg.div_start
    end = cfg.max_lr / cfg.div_end
    warm = max(1, round(cfg.warmup_frac * (total_steps - 1)))
    if step <= warm:
        return start + (cfg.max_lr - start) * (step / warm)
    progress = (step - warm) / (total_steps - 1 - warm)
    return end + (cfg.max_lr - end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def softmax(y: np.ndarray) -> np.ndarray:
    """Max-subtracted stable softmax along the last axis."""
    y = np.asarray(y, dtype=np.float64)
    z = y - y.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_confidence(p: np.ndarray, n_classes: int | None = None) -> tuple:
    """Normalized entropy (log base N) of a distribution and 1 - H.

    H = -sum p_i * log_N(min(1, p_i + eps)), which lies in [0, 1]: 1 for the
    uniform distribution, 0 for a one-hot. For N = 2 this is Shannon entropy
    in bits. Confidence is 1 - H, clamped to [0, 1].
    """
    p = np.asarray(p, dtype=np.float64)
    n = n_classes if n_classes is not None else p.shape[-1]
    if n < 2:
        raise DataError("entropy needs at least 2 classes")
    logs = np.log(np.minimum(1.0, p + EPSILON)) / np.log(n)
    h = float(-(p * logs).sum()) + 0.0  # normalize -0.0
    h = min(max(h, 0.0), 1.0)
    return h, 1.0 - h


@dataclass
class ClassProbabilities:
    p: np.ndarray
    entropy: float
    confidence: float
    label_id: int


@dataclass
class SoftmaxModel:
    weights: np.ndarray  # (N, D)
    bias: np.ndarray  # (N,)
    class_ids: list
    class_names: list
    feature_config: FeatureConfig
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def scores(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.weights.shape[1]:
            raise DataError(
                f"feature dim {features.shape[-1]} does not match model dim {self.weights.shape[1]}"
            )
        z = (features - self.feature_mean) / self.feature_scale
        return z @ self.weights.T + self.bias

    def predict_features(self, features: np.ndarray) -> ClassProbabilities:
        p = softmax(self.scores(features))
        h, conf = entropy_confidence(p, self.n_classes)
        return ClassProbabilities(p=p, entropy=h, confidence=conf, label_id=self.class_ids[int(p.argmax())])

    def save(self, path) -> None:
        def pack(a):
            a = np.ascontiguousarray(a, dtype=np.float64)
            return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}

        doc = {
            "version": CHECKPOINT_VERSION,
            "weights": pack(self.weights),
            "bias": pack(self.bias),
            "class_ids": list(self.class_ids),
            "class_names": list(self.class_names),
            "feature_config": self.feature_config.to_dict(),
            "feature_mean": pack(self.feature_mean),
            "feature_scale": pack(self.feature_scale),
            "metadata": self.metadata,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "SoftmaxModel":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {doc.get('version')}")

        def unpack(d):
            arr = np.frombuffer(base64.b64decode(d["data"]), dtype=np.float64)
            return arr.reshape(d["shape"]).copy()

        return cls(
            weights=unpack(doc["weights"]),
            bias=unpack(doc["bias"]),
            class_ids=[int(c) for c in doc["class_ids"]],
            class_names=[str(n) for n in doc["class_names"]],
            feature_config=FeatureConfig.from_dict(doc["feature_config"]),
            feature_mean=unpack(doc["feature_mean"]),
            feature_scale=unpack(doc["feature_scale"]),
            metadata=doc.get("metadata", {}),
        )


def cross_entropy_loss_and_grad(weights, bias, X, y_idx):
    """Mean cross-entropy over a batch and its analytic gradients.

    y_idx holds class row indices (not raw label ids). Gradients:
    dW = (P - Y)^T X / m, db = mean(P - Y).
    """
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    logits = X @ weights.T + bias
    p = softmax(logits)
    rows = np.arange(m)
    loss = float(-np.log(np.maximum(p[rows, y_idx], 1e-300)).mean())
    delta = p.copy()
    delta[rows, y_idx] -= 1.0
    grad_w = delta.T @ X / m
    grad_b = delta.mean(axis=0)
    return loss, grad_w, grad_b


@dataclass
class TrainingCurve:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)

    def to_dict(self):
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "learning_rate": self.learning_rate}


def fit_softmax(
    X_train, y_train, X_val, y_val,
    class_ids, class_names,
    cfg: TrainConfig = TrainConfig(),
    feature_config: FeatureConfig = FeatureConfig(),
    epoch_features=None,
):
    """Core SGD loop over pre-extracted features.

    ``epoch_features(epoch) -> (X, y)`` lets the caller re-augment the
    training set every epoch; when omitted the same matrix is reused.
    Returns the best-validation-loss checkpoint and the training curve.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train)
    if X_train.size == 0:
        raise DataError("empty training set")
    if len(class_ids) < 2:
        raise DataError("need at least 2 classes in train")
    y_val = np.asarray(y_val)
    missing = set(np.unique(y_val).tolist()) - set(range(len(class_ids)))
    if missing:
        logger.warning("validation contains class rows %s absent from train; dropped", sorted(missing))
        keep = np.array([i for i, lab in enumerate(y_val) if lab in set(range(len(class_ids)))], dtype=int)
        X_val = np.asarray(X_val)[keep]
        y_val = y_val[keep]

    mean = X_train.mean(axis=0)
    scale = X_train.std(axis=0)
    scale[scale < 1e-8] = 1.0

    rng = np.random.default_rng(cfg.seed)
    n, dim = X_train.shape
    k = len(class_ids)
    weights = np.zeros((k, dim))
    bias = np.zeros(k)
    vel_w = np.zeros_like(weights)
    vel_b = np.zeros_like(bias)

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs_max * steps_per_epoch
    Xv = (np.asarray(X_val, dtype=np.float64) - mean) / scale
    yv = np.asarray(y_val)

    curve = TrainingCurve()
    best_val = math.inf
    best = (weights.copy(), bias.copy())
    best_epoch = -1
    stale = 0
    step = 0
    epochs_run = 0

    for epoch in range(cfg.epochs_max):
        if epoch_features is not None:
            Xe, ye = epoch_features(epoch)
            Xe = np.asarray(Xe, dtype=np.float64)
        else:
            Xe, ye = X_train, y_train
        Xe = (Xe - mean) / scale
        order = rng.permutation(len(ye))
        epoch_loss = 0.0
        lr = cfg.max_lr
        for b0 in range(0, len(ye), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            loss, gw, gb = cross_entropy_loss_and_grad(weights, bias, Xe[batch], np.asarray(ye)[batch])
            lr = one_cycle_lr(step, total_steps, cfg)
            vel_w = cfg.momentum * vel_w + gw
            vel_b = cfg.momentum * vel_b + gb
            weights = weights - lr * vel_w
            bias = bias - lr * vel_b
            epoch_loss += loss * len(batch)
            step += 1
        epochs_run = epoch + 1

        if len(yv):
            val_loss, _, _ = cross_entropy_loss_and_grad(weights, bias, Xv, yv)
        else:
            val_loss = epoch_loss / len(ye)
        curve.train_loss.append(epoch_loss / len(ye))
        curve.val_loss.append(float(val_loss))
        curve.learning_rate.append(float(lr))

        if val_loss < best_val:
            best_val = val_loss
            best = (weights.copy(), bias.copy())
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                break

    model = SoftmaxModel(
        weights=best[0],
        bias=best[1],
        class_ids=list(class_ids),
        class_names=list(class_names),
        feature_config=feature_config,
        feature_mean=mean,
        feature_scale=scale,
        metadata={
            "epochs_run": epochs_run,
            "best_epoch": best_epoch,
            "best_val_loss": None if math.isinf(best_val) else float(best_val),
            "train_config": cfg.to_dict(),
        },
    )
    return model, curve


def train(
    train_items,
    val_items,
    cfg: TrainConfig = TrainConfig(),
    augment_cfg: AugmentConfig = AugmentConfig(),
    feature_config: FeatureConfig = FeatureConfig(),
    class_names: dict | None = None,
):
    """Train from (image, label_id) pairs with per-epoch augmentation.

    Augmentation touches the training set only; validation images go through
    plain resize + normalize. Deterministic for a fixed (cfg.seed,
    augment_cfg.rng_seed).
    """
    if not train_items:
        raise DataError("empty training set")
    images = [im for im, _ in train_items]
    labels = [lab for _, lab in train_items]
    class_ids = sorted(set(labels))
    if len(class_ids) < 2:
        raise DataError("need at least 2 classes in train")
    row_of = {c: i for i, c in enumerate(class_ids)}
    y_train = np.array([row_of[lab] for lab in labels])

    val_images = [im for im, _ in val_items]
    val_labels = [lab for _, lab in val_items]
    unseen = sorted(set(val_labels) - set(class_ids))
    if unseen:
        logger.warning("classes %s present in validation but absent from train", unseen)
    keep = [i for i, lab in enumerate(val_labels) if lab in row_of]
    X_val = np.stack([extract_features(val_images[i], feature_config) for i in keep]) if keep else np.zeros((0, feature_config.dim))
    y_val = np.array([row_of[val_labels[i]] for i in keep], dtype=int)

    X_base = np.stack([extract_features(im, feature_config) for im in images])

    def epoch_features(epoch):
        rng = np.random.default_rng([augment_cfg.rng_seed, epoch])
        X = np.stack([
            extract_features(imaging.augment(im, augment_cfg, rng), feature_config)
            for im in images
        ])
        return X, y_train

    names = [str((class_names or {}).get(c, c)) for c in class_ids]
    model, curve = fit_softmax(
        X_base, y_train, X_val, y_val,
        class_ids=class_ids,
        class_names=names,
        cfg=cfg,
        feature_config=feature_config,
        epoch_features=epoch_features,
    )
    return model, curve


def predict(model: SoftmaxModel, image) -> ClassProbabilities:
    """Classify one image: resize + normalize features, no augmentation."""
    feats = extract_features(image, model.feature_config)
    return model.predict_features(feats)
