"""SGD-with-momentum training loop, multi-step LR decay, and evaluation.

Every run is a pure function of (seed, config, dataset): weight init, epoch
shuffles and batch order all derive from the run seed, so repeating a run
reproduces the loss curve bit for bit on the same platform. Within each
iteration the order is quantize -> forward -> backward -> update of the
full-precision masters, enforced by the network's phase assertions.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, NonFiniteGradient, NonFiniteLoss, TrainingDiverged
from .nn import Network
from .packfmt import write_model_file
from .tensor import Rng

_INIT_STREAM = 0x494E4954  # distinct RNG streams per role under one run seed
_SHUFFLE_STREAM = 0x53485546


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay_epochs: tuple = (15, 25)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 50
    epochs: int = 10
    seed: int = 1
    weight_mode: str = "ternary"

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "initial_lr": self.initial_lr,
            "lr_decay_epochs": list(self.lr_decay_epochs),
            "lr_decay_factor": self.lr_decay_factor,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "weight_mode": self.weight_mode,
        }


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float
    wall_time: float


@dataclass
class TrainReport:
    config: TrainConfig
    epochs: list = field(default_factory=list)  # EpochStats
    best_epoch: int = -1
    best_val_acc: float = -1.0
    checkpoint_path: str | None = None
    dataset_tag: str = ""
    best_records = None  # ModelFile snapshot of the best epoch

    def loss_curve(self):
        return [e.train_loss for e in self.epochs]

    def to_csv(self) -> str:
        lines = ["epoch,loss,val_acc,lr"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_acc!r},{e.lr!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config.to_dict(),
                "dataset": self.dataset_tag,
                "best_epoch": self.best_epoch,
                "best_val_acc": self.best_val_acc,
                "checkpoint": self.checkpoint_path,
                "epochs": [
                    {
                        "epoch": e.epoch,
                        "loss": e.train_loss,
                        "val_acc": e.val_acc,
                        "lr": e.lr,
                        "wall_time": e.wall_time,
                    }
                    for e in self.epochs
                ],
            },
            indent=2,
        )


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """initial_lr * factor^(number of decay epochs <= epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    hits = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.initial_lr * config.lr_decay_factor**hits


@dataclass
class MomentumState:
    """One velocity buffer per trainable parameter, keyed by name."""

    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_network(cls, net: Network) -> "MomentumState":
        return cls({name: np.zeros_like(value) for name, value, _ in net.parameters()})


def sgd_step(net: Network, state: MomentumState, lr: float, momentum: float, weight_decay: float):
    """v <- momentum*v - lr*(g + wd*w); w <- w + v, on the fp masters."""
    lr32 = np.float32(lr)
    mom32 = np.float32(momentum)
    wd32 = np.float32(weight_decay)
    for name, value, grad in net.parameters():
        if not np.isfinite(grad).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        v = state.velocity[name]
        v *= mom32
        v -= lr32 * (grad + wd32 * value)
        value += v
    net.mark_updated()


def evaluate(net: Network, dataset, batch_size: int = 250) -> float:
    """Top-1 accuracy over the split; eval-mode forward, no state mutation."""
    n = dataset.images.shape[0]
    if n == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    correct = 0
    for start in range(0, n, batch_size):
        batch = dataset.images[start : start + batch_size]
        res = net.forward(batch, mode="eval")
        correct += int((res.predictions == dataset.labels[start : start + batch_size]).sum())
    return correct / n


def train(
    net: Network,
    train_ds,
    val_ds,
    config: TrainConfig,
    out_dir=None,
    checkpoint_name: str = "best.twn",
) -> TrainReport:
    """Run the full loop; returns the per-epoch report.

    The network is (re)initialized from the run seed. The best-validation
    model is checkpointed in .twn form (ties keep the earlier epoch). A
    non-finite loss or gradient aborts with TrainingDiverged carrying the
    last good checkpoint.
    """
    n = train_ds.images.shape[0]
    if n == 0:
        raise DatasetError("training split is empty")
    net.set_weight_mode(config.weight_mode)
    net.initialize(Rng(config.seed, stream=_INIT_STREAM))
    shuffle_rng = Rng(config.seed, stream=_SHUFFLE_STREAM)
    state = MomentumState.for_network(net)
    report = TrainReport(config, dataset_tag=getattr(train_ds, "split", ""))
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, checkpoint_name)
    best_records = None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        perm = shuffle_rng.permutation(n)
        losses = []
        # drop the ragged tail so the BN batch size stays constant
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = perm[start : start + config.batch_size]
            try:
                res = net.forward(train_ds.images[idx], train_ds.labels[idx], mode="train")
                net.backward()
                sgd_step(net, state, lr, config.momentum, config.weight_decay)
            except (NonFiniteLoss, NonFiniteGradient) as e:
                raise TrainingDiverged(
                    f"epoch {epoch}: {e}; last good checkpoint: {ckpt_path}", ckpt_path
                ) from e
            losses.append(res.loss)
        val_acc = evaluate(net, val_ds)
        report.epochs.append(
            EpochStats(epoch, float(np.mean(losses)), val_acc, lr, time.perf_counter() - t0)
        )
        if val_acc > report.best_val_acc:
            report.best_val_acc = val_acc
            report.best_epoch = epoch
            best_records = net.to_records()
            if ckpt_path is not None:
                write_model_file(ckpt_path, best_records)
    report.checkpoint_path = ckpt_path
    report.best_records = best_records
    return report
