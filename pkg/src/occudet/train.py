"""Training loop: likelihood loss, Adam with warmup-cosine schedule,
validation-F1 model selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import accuracy_f1
from .nn import OccupancyNet
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 100
    warmup_epochs: int = 7
    batch_size: int = 64
    seed: int = 0
    decay: str = "coupled"  # L2 added to gradients; "decoupled" subtracts directly

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs < max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.decay not in ("coupled", "decoupled"):
            raise ValueError(f"unknown decay mode {self.decay!r}")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear ramp from 0 over the warmup, then a cosine decay to 0."""
    if not 0 <= epoch < config.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.max_epochs})")
    if epoch < config.warmup_epochs:
        return config.lr * epoch / config.warmup_epochs
    span = config.max_epochs - config.warmup_epochs
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - config.warmup_epochs) / span))


def decay_exempt(name: str) -> bool:
    """Batchnorm affine parameters and attention gains skip weight decay."""
    return ".bn." in name or name.endswith(".gain")


class Adam:
    """Adam over a ParamStore. Weight decay is coupled (added to the gradient
    before the moment updates) unless decay="decoupled"."""

    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, decay="coupled"):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.store.params.items():
            if p.grad is None:
                continue
            g = p.grad
            decayed = self.weight_decay > 0 and not decay_exempt(name)
            if decayed and self.decay == "coupled":
                g = g + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            if decayed and self.decay == "decoupled":
                update = update + lr * self.weight_decay * p.data
            p.data -= update

    def state(self) -> dict:
        return {"m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()},
                "step": self.step_count}

    def load_state(self, state: dict) -> None:
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
        self.step_count = int(state["step"])


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def nll_loss(probabilities: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log likelihood of one-hot targets under given probabilities.

    Only the true-class probability of each row enters the log, so a perfect
    one-hot prediction scores exactly zero. A predicted probability of exactly
    zero at the true class yields an infinite loss; training avoids this by
    using the fused logit path below.
    """
    n, n_classes = probabilities.shape
    ones = Tensor(np.ones((n_classes, 1)))
    true_class_prob = T.matmul(T.mul(Tensor(targets), probabilities), ones)
    return T.mul(T.tsum(T.log(true_class_prob)), Tensor(-1.0 / n))


def nll_loss_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Same loss fused with the final softmax for numerical stability."""
    n = logits.shape[0]
    picked = T.mul(Tensor(targets), T.log_softmax(logits))
    return T.mul(T.tsum(picked), Tensor(-1.0 / n))


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_loss: float):
        super().__init__(
            f"loss became non-finite in epoch {epoch}; "
            f"last finite batch loss was {last_finite_loss}")
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    val_f1: float
    lr: float


@dataclass
class TrainResult:
    best_epoch: int
    best_val_f1: float
    history: list[EpochRecord]
    best_state: dict
    best_opt_state: dict
    val_predictions: list[np.ndarray] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        lines = ["epoch,train_loss,val_acc,val_f1,lr"]
        for r in self.history:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_acc!r},{r.val_f1!r},{r.lr!r}")
        return lines


def predict(net: OccupancyNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class predictions; runs outside any tape."""
    preds = []
    for i in range(0, len(x), batch_size):
        probs = net.forward(Tensor(x[i:i + batch_size]), train=False)
        preds.append(probs.data.argmax(axis=1))
    return np.concatenate(preds)


def train_case(case, config: TrainConfig, net: OccupancyNet | None = None) -> TrainResult:
    """Run the full optimization on a prepared case and keep the best epoch.

    The best epoch is the one with the highest validation F1 (earlier epoch
    wins ties). Raises TrainingDiverged if a batch loss stops being finite.
    """
    if net is None:
        net = OccupancyNet(seed=config.seed)
    opt = Adam(net.store, weight_decay=config.weight_decay, decay=config.decay)
    shuffle_rng = np.random.default_rng([config.seed, 1])

    train_x, train_y = case.train_x, case.train_y
    targets = one_hot(train_y, net.n_classes)
    n = len(train_x)

    best_f1 = -1.0
    best_epoch = -1
    best_state: dict = {}
    best_opt: dict = {}
    history: list[EpochRecord] = []
    val_preds_per_epoch: list[np.ndarray] = []
    last_finite = float("nan")

    for epoch in range(config.max_epochs):
        lr_t = lr_schedule(epoch, config)
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            net.store.zero_grad()
            with Tape():
                logits = net.logits(Tensor(train_x[idx]), train=True)
                loss = nll_loss_from_logits(logits, targets[idx])
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(epoch, last_finite)
            last_finite = loss_val
            loss.backward()
            opt.step(lr_t)
            losses.append(loss_val)

        val_pred = predict(net, case.val_x)
        val_preds_per_epoch.append(val_pred)
        val_acc, val_f1 = accuracy_f1(val_pred, case.val_y)
        history.append(EpochRecord(epoch, float(np.mean(losses)), val_acc, val_f1, lr_t))
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_state = net.store.snapshot()
            best_opt = opt.state()

    return TrainResult(best_epoch, best_f1, history, best_state, best_opt,
                       val_preds_per_epoch)
