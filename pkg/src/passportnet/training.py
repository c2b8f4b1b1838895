"""Training loops that embed passports and signatures.

v1 trains every forward through the passport branch (batch norm).  v2/v3 are
multi-task: each iteration evaluates both the public and the passport branch,
sums the two losses and takes a single optimizer step (group norm).  v3
additionally concatenates a couple of trigger samples into every minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .data import TriggerSet
from .errors import ConfigError, SchemeError, TrainingError
from .models import PassportModel, build_model
from .serialization import load_container, save_container
from .signatures import model_sign_loss

__all__ = [
    "SchemeConfig",
    "TrainResult",
    "TriggerSet",
    "combined_loss",
    "train_v1",
    "train_multitask",
    "train_plain",
    "run_training",
    "evaluate_accuracy",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class SchemeConfig:
    """Hyper-parameters for one embedding run."""

    scheme: str = "v1"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    lr_milestones: tuple | None = None  # epochs at which lr divides by 10
    momentum: float = 0.9
    lambda_r: float = 1.0
    lambda_t: float = 0.0  # only v3 trains on a trigger set
    gamma0: float = 0.1
    trigger_batch: int = 2
    seed: int = 0
    deterministic: bool = False

    @classmethod
    def for_scheme(cls, scheme, **overrides):
        cfg = cls(scheme=scheme, **overrides)
        if scheme == "v3" and "lambda_t" not in overrides:
            cfg.lambda_t = 1.0
        cfg.validate()
        return cfg

    def validate(self):
        if self.scheme not in ("v1", "v2", "v3"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size positive")
        if self.scheme in ("v1", "v2") and self.lambda_t != 0:
            raise ConfigError(f"scheme {self.scheme} does not use a trigger set; lambda_t must be 0")
        if self.scheme == "v3" and self.lambda_t <= 0:
            raise ConfigError("scheme v3 requires lambda_t > 0")

    def resolved_milestones(self):
        """Learning-rate drop epochs, scaled from the 200-epoch reference schedule."""
        if self.lr_milestones is not None:
            return tuple(self.lr_milestones)
        if self.epochs < 4:
            return ()
        return (self.epochs // 2, self.epochs - max(1, self.epochs // 4))

    def lr_at(self, epoch):
        lr = self.lr
        for milestone in self.resolved_milestones():
            if epoch >= milestone:
                lr /= 10.0
        return lr

    def to_dict(self):
        d = asdict(self)
        if d["lr_milestones"] is not None:
            d["lr_milestones"] = list(d["lr_milestones"])
        return d


@dataclass
class TrainResult:
    model: PassportModel
    history: list = field(default_factory=list)


def evaluate_accuracy(model, dataset, passports=None, sign_masks=None, batch_size=256):
    """Top-1 accuracy in percent (0..100)."""
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for x, y in dataset.batches(batch_size):
            logits = model(x, passports=passports, sign_masks=sign_masks)
            correct += int((logits.argmax(dim=1) == y).sum())
    if was_training:
        model.train()
    return 100.0 * correct / len(dataset)


def combined_loss(model, batch, trigger_batch=None, signature=None, passports=None,
                  config=None):
    """Task loss + lambda_t * trigger loss + lambda_r * sign loss."""
    config = config or SchemeConfig()
    x, y = batch
    loss = F.cross_entropy(model(x, passports=passports), y)
    if config.lambda_t > 0 and trigger_batch is not None:
        xt, yt = trigger_batch
        loss = loss + config.lambda_t * F.cross_entropy(model(xt, passports=passports), yt)
    if config.lambda_r > 0 and model.passport_layer_ids:
        if signature is None:
            raise ConfigError("lambda_r > 0 requires a signature")
        if passports is None:
            raise ConfigError("lambda_r > 0 requires passports")
        loss = loss + config.lambda_r * model_sign_loss(model, passports, signature)
    return loss


def run_training(model, data, config, loss_fn, trigger_set=None):
    """Generic minibatch SGD loop shared by every embedding flavour.

    `loss_fn(model, x, y)` returns the scalar training loss.  When a trigger
    set is supplied, `config.trigger_batch` samples of it are concatenated
    into every minibatch.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        epoch_loss, n_batches = 0.0, 0
        for x, y in data.batches(config.batch_size, rng=rng):
            if trigger_set is not None and config.trigger_batch > 0 and len(trigger_set):
                pick = rng.integers(0, len(trigger_set), size=config.trigger_batch)
                idx = torch.from_numpy(pick)
                x = torch.cat([x, trigger_set.images[idx]])
                y = torch.cat([y, trigger_set.labels[idx]])
            optimizer.zero_grad()
            loss = loss_fn(model, x, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss.item()} at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        history.append(
            {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / max(1, n_batches)}
        )
    return TrainResult(model=model, history=history)


def train_plain(model, data, config):
    """Cross-entropy training of an unprotected model."""

    def loss_fn(m, x, y):
        return F.cross_entropy(m(x), y)

    return run_training(model, data, config, loss_fn)


def train_v1(model, data, passports, signature, config):
    """Embed passports with scheme v1: every forward uses the passport branch."""
    if model.scheme != "v1" or model.norm_kind != "batch":
        raise SchemeError("train_v1 expects a batch-norm v1 model")
    if config.scheme != "v1":
        raise ConfigError(f"config is for scheme {config.scheme!r}, model is v1")

    def loss_fn(m, x, y):
        loss = F.cross_entropy(m(x, passports=passports), y)
        if config.lambda_r > 0:
            loss = loss + config.lambda_r * model_sign_loss(m, passports, signature)
        return loss

    return run_training(model, data, config, loss_fn)


def train_multitask(model, data, passports, signature, config, trigger_set=None):
    """Embed passports with scheme v2/v3: public + passport branch per step."""
    if model.scheme not in ("v2", "v3"):
        raise SchemeError(f"train_multitask expects a v2/v3 model, got {model.scheme!r}")
    if model.norm_kind != "group":
        raise SchemeError("train_multitask expects a group-norm model")
    if config.scheme != model.scheme:
        raise ConfigError(f"config scheme {config.scheme!r} != model scheme {model.scheme!r}")
    if model.scheme == "v3" and (trigger_set is None or len(trigger_set) == 0):
        raise ConfigError("scheme v3 requires a non-empty trigger set")
    if model.scheme == "v2":
        trigger_set = None

    def loss_fn(m, x, y):
        loss = F.cross_entropy(m(x), y)  # public branch
        loss = loss + F.cross_entropy(m(x, passports=passports), y)
        if config.lambda_r > 0:
            loss = loss + config.lambda_r * model_sign_loss(m, passports, signature)
        return loss

    return run_training(model, data, config, loss_fn, trigger_set=trigger_set)


def save_checkpoint(model, path, meta=None, history=None):
    """Checkpoint container: named float32 arrays plus training metadata."""
    arrays = {}
    counters = {}
    for name, tensor in model.state_dict().items():
        if tensor.dtype in (torch.int64, torch.int32):
            counters[name] = int(tensor.item()) if tensor.numel() == 1 else tensor.tolist()
        else:
            arrays[name] = tensor.detach().cpu().numpy()
    full_meta = {
        "architecture": model.architecture,
        "scheme": model.scheme,
        "passport_layer_ids": list(model.passport_layer_ids),
        "num_classes": model.num_classes,
        "counters": counters,
        "history": history or [],
        "extra": meta or {},
    }
    save_container(path, "checkpoint", arrays, meta=full_meta, fingerprint=model.fingerprint())


def load_checkpoint(path):
    """Rebuild the model stored at `path`; returns (model, meta dict)."""
    box = load_container(path, expected_kind="checkpoint")
    meta = box.meta
    model = build_model(
        meta["architecture"],
        meta["scheme"],
        passport_layer_ids=meta["passport_layer_ids"],
        num_classes=meta["num_classes"],
    )
    state = model.state_dict()
    for name, arr in box.arrays.items():
        state[name] = torch.from_numpy(arr).to(state[name].dtype).reshape(state[name].shape)
    for name, value in meta["counters"].items():
        state[name] = torch.tensor(value, dtype=state[name].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, meta
