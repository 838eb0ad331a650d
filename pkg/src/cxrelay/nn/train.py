"""Training loop with validation-loss checkpointing and patience."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import categorical_crossentropy, crossentropy_grad, one_hot
from .model import ModelArtifact, Network
from .optim import AdamState, SgdState, TrainingDivergedError, step_adam, step_sgd


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    epochs: int = 500
    optimizer: str = "adam"         # "sgd" | "adam"
    decay: float = 0.9              # SGD momentum / Adam beta1
    lr_decay: float = 1.0           # per-epoch multiplicative LR factor
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience > self.epochs:
            raise ValueError("patience must be <= epochs")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0             # 1-based; 0 = never improved
    stopped_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else float("nan")


def backward(model: ModelArtifact, batch: np.ndarray, onehot: np.ndarray,
             dtype=np.float64) -> list[np.ndarray]:
    """Gradient of the mean cross-entropy w.r.t. every weight tensor."""
    net = Network(model, dtype=dtype)
    pred = net.forward(batch)
    return net.backward(crossentropy_grad(pred, np.asarray(onehot, dtype=dtype)))


def evaluate(net: Network, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> tuple[float, float, dict]:
    """Returns (loss, accuracy, metrics) on a labeled set."""
    losses = []
    preds = []
    for i in range(0, len(x), batch_size):
        p = net.forward(x[i:i + batch_size])
        losses.append(categorical_crossentropy(p, one_hot(y[i:i + batch_size],
                                                          dtype=p.dtype)) * len(p))
        preds.append(p.argmax(axis=1))
    pred = np.concatenate(preds)
    y = np.asarray(y)
    loss = float(sum(losses) / len(x))
    accuracy = float((pred == y).mean())
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return loss, accuracy, {"precision": precision, "recall": recall,
                            "accuracy": accuracy}


def train(model: ModelArtifact, train_xy: tuple[np.ndarray, np.ndarray],
          val_xy: tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
          dtype=np.float32) -> tuple[ModelArtifact, TrainHistory]:
    """Train and return the checkpoint with the best validation loss.

    Stops early once ``cfg.patience`` epochs pass without improvement. The
    returned artifact's version is ``model.version + 1`` and its stored
    metrics come from the best epoch's validation pass.
    """
    x_train, y_train = train_xy
    x_val, y_val = val_xy
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be non-empty")

    net = Network(model, dtype=dtype)
    rng = np.random.default_rng(cfg.seed)
    opt_state = (AdamState(beta1=cfg.decay) if cfg.optimizer == "adam"
                 else SgdState(momentum=cfg.decay))
    step = step_adam if cfg.optimizer == "adam" else step_sgd

    history = TrainHistory()
    best_params = [p.copy() for p in net.params]
    best_loss = float("inf")
    best_metrics: dict = dict(model.val_metrics)
    since_best = 0
    lr = cfg.learning_rate

    if cfg.epochs == 0:
        _, _, best_metrics = evaluate(net, x_val, y_val)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_train))
        epoch_loss = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb = np.asarray(x_train[idx], dtype=dtype)
            yb = one_hot(y_train[idx], dtype=dtype)
            pred = net.forward(xb)
            loss = categorical_crossentropy(pred, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss diverged at epoch {epoch}", history)
            epoch_loss += loss * len(idx)
            grads = net.backward(crossentropy_grad(pred, yb))
            net.set_params(step(net.params, grads, lr, opt_state))
        lr *= cfg.lr_decay

        val_loss, val_acc, metrics = evaluate(net, x_val, y_val)
        history.train_loss.append(epoch_loss / len(order))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        history.stopped_epoch = epoch

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = [p.copy() for p in net.params]
            best_metrics = metrics
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    net.set_params(best_params)
    artifact = net.to_artifact(version=model.version + 1,
                               val_metrics=best_metrics)
    return artifact, history


def transfer_retrain(base: ModelArtifact,
                     data_xy: tuple[np.ndarray, np.ndarray],
                     val_xy: tuple[np.ndarray, np.ndarray],
                     cfg: TrainConfig) -> tuple[ModelArtifact, TrainHistory]:
    """Continue training from the base model's weights on new data."""
    if len(data_xy[0]) == 0:
        raise ValueError("update batch is empty")
    return train(base, data_xy, val_xy, cfg)
