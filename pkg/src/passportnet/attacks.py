"""Adversarial procedures: watermark forging, passport ambiguity attacks and
removal attacks (fine-tuning, pruning, sign flips).

Every attack works on a frozen clone or a deep copy, so the caller's model is
never mutated; outcomes are plain records suitable for the results store.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .baselines import FeatureWatermark, detect_feature_watermark, flat_layer_weights
from .data import TriggerSet
from .errors import ConfigError
from .models import ScalePair
from .passports import PassportPair, PassportSet
from .signatures import detect_signature, flip_signature, model_sign_loss
from .training import SchemeConfig, evaluate_accuracy, run_training
from .verification import noninvertibility_probe, trigger_detection_rate


@dataclass
class AttackBudget:
    """Compute allowance for an optimization-based attack."""

    iterations: int = 100
    lr: float = 0.01
    seed: int = 0
    data_access: str = "train+test"  # none | test-only | train+test
    eval_every: int = 10


def budget_from_training(config, n_train, fraction=0.05, lr=0.01, seed=0,
                         data_access="train+test", eval_every=10):
    """Budget as a fraction of the original training iterations (default 5%)."""
    per_epoch = math.ceil(n_train / config.batch_size)
    iterations = max(1, math.ceil(fraction * config.epochs * per_epoch))
    return AttackBudget(
        iterations=iterations, lr=lr, seed=seed, data_access=data_access,
        eval_every=eval_every,
    )


@dataclass
class AttackOutcome:
    kind: str
    success: bool
    metrics: dict
    config: dict = field(default_factory=dict)


def _frozen_clone(model):
    clone = copy.deepcopy(model)
    clone.eval()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


# ---------------------------------------------------------------------------
# Forging attacks on the watermarking baselines (weights stay frozen)
# ---------------------------------------------------------------------------

def forge_feature_watermark(model, new_bits, budget, embed_layer_id=None,
                            init_projection=None):
    """Fit a counterfeit projection X' onto frozen weights for arbitrary bits.

    No training data is used; the model is never touched, so fidelity is
    preserved by construction.
    """
    if embed_layer_id is None:
        embed_layer_id = list(model.blocks)[1]
    w = flat_layer_weights(model, embed_layer_id).detach().clone()
    bits = torch.as_tensor(new_bits, dtype=torch.float32)
    gen = torch.Generator().manual_seed(budget.seed)
    if init_projection is not None:
        projection = init_projection.detach().clone().requires_grad_(True)
    else:
        projection = torch.randn(bits.numel(), w.numel(), generator=gen).requires_grad_(True)

    def rate():
        wm = FeatureWatermark(projection.detach(), bits, embed_layer_id)
        return detect_feature_watermark(model, wm)

    iterations_used = 0
    detection = rate()
    if detection < 1.0:
        optimizer = torch.optim.Adam([projection], lr=max(budget.lr, 0.05))
        for step in range(budget.iterations):
            optimizer.zero_grad()
            loss = F.binary_cross_entropy_with_logits(projection @ w, bits, reduction="sum")
            loss.backward()
            optimizer.step()
            iterations_used = step + 1
            if step % 5 == 0 or step == budget.iterations - 1:
                detection = rate()
                if detection == 1.0:
                    break
    forged = FeatureWatermark(projection.detach().clone(), bits, embed_layer_id)
    outcome = AttackOutcome(
        kind="forge-feature",
        success=detection == 1.0,
        metrics={"detection_rate": detection, "iterations_used": iterations_used},
        config={"budget": asdict(budget), "embed_layer_id": embed_layer_id,
                "data_access": "none"},
    )
    return forged, outcome


@dataclass
class TriggerForgeConfig:
    """Forged trigger images are base + eta * trainable noise (eta small)."""

    n_base: int = 20
    eta: float = 0.04
    iterations: int = 300
    lr: float = 0.5
    seed: int = 0


def forge_trigger_set(model, image_pool, config, passports=None):
    """Optimize invisible noise so frozen weights classify base images to
    randomly assigned labels."""
    frozen = _frozen_clone(model)
    rng = np.random.default_rng(config.seed)
    if image_pool.shape[0] < config.n_base:
        raise ConfigError(f"image pool has {image_pool.shape[0]} < n_base={config.n_base}")
    idx = torch.from_numpy(rng.choice(image_pool.shape[0], size=config.n_base, replace=False))
    base = image_pool[idx].clone()
    labels = torch.from_numpy(rng.integers(0, frozen.num_classes, size=config.n_base))
    gen = torch.Generator().manual_seed(config.seed)
    noise = torch.randn(base.shape, generator=gen).requires_grad_(True)

    def detection(images):
        with torch.no_grad():
            preds = frozen(images, passports=passports).argmax(dim=1)
        return float((preds == labels).float().mean())

    optimizer = torch.optim.Adam([noise], lr=config.lr)
    iterations_used = 0
    rate = detection(base + config.eta * noise.detach())
    if rate < 1.0 and config.eta > 0:
        for step in range(config.iterations):
            optimizer.zero_grad()
            logits = frozen(base + config.eta * noise, passports=passports)
            loss = F.cross_entropy(logits, labels)
            loss.backward()
            optimizer.step()
            iterations_used = step + 1
            if step % 10 == 0 or step == config.iterations - 1:
                rate = detection(base + config.eta * noise.detach())
                if rate == 1.0:
                    break
    images = (base + config.eta * noise.detach()).clone()
    forged = TriggerSet(images=images, labels=labels)
    outcome = AttackOutcome(
        kind="forge-trigger",
        success=rate == 1.0,
        metrics={"detection_rate": rate, "iterations_used": iterations_used},
        config={**asdict(config), "data_access": "none"},
    )
    return forged, outcome


# ---------------------------------------------------------------------------
# Ambiguity attacks on passport models
# ---------------------------------------------------------------------------

def attack_random_passport(model, test_set, n=50, seed=0, target_accuracy=None):
    """fake1: accuracy statistics under n freshly random passports."""
    target = float("nan") if target_accuracy is None else target_accuracy
    stats = noninvertibility_probe(model, test_set, target, n_fake=n, seed=seed)
    return AttackOutcome(
        kind="random-passport",
        success=True,
        metrics={
            "accuracies": stats.accuracies,
            "mean_accuracy": stats.mean_accuracy,
            "max_accuracy": stats.max_accuracy,
            "gaps": stats.gaps,
        },
        config={"n": n, "seed": seed, "target_accuracy": target},
    )


def _attack_leaves(model, mode, seed, init_passports=None):
    """Trainable passport (or scale) tensors for the reverse-engineering attacks."""
    shapes = model.conv_input_shapes()
    rng = np.random.default_rng(seed)
    leaves, presented = OrderedDict(), OrderedDict()
    for layer_id in model.passport_layer_ids:
        if mode == "passport":
            if init_passports is not None:
                pair = init_passports[layer_id]
                pg = pair.p_gamma.detach().clone().requires_grad_(True)
                pb = pair.p_beta.detach().clone().requires_grad_(True)
            else:
                pg = torch.from_numpy(
                    rng.uniform(-1, 1, size=shapes[layer_id]).astype(np.float32)
                ).requires_grad_(True)
                pb = torch.from_numpy(
                    rng.uniform(-1, 1, size=shapes[layer_id]).astype(np.float32)
                ).requires_grad_(True)
            leaves[layer_id] = (pg, pb)
            presented[layer_id] = PassportPair(pg, pb, provenance="forged")
        elif mode == "gamma_beta":
            c = model.blocks[layer_id].out_channels
            g = torch.from_numpy(
                rng.normal(0, 0.3, size=c).astype(np.float32)
            ).requires_grad_(True)
            b = torch.from_numpy(
                rng.normal(0, 0.3, size=c).astype(np.float32)
            ).requires_grad_(True)
            leaves[layer_id] = (g, b)
            presented[layer_id] = ScalePair(g, b)
        else:
            raise ConfigError(f"unknown attack mode {mode!r}")
    return leaves, presented


def _snapshot(presented):
    snap = OrderedDict()
    for layer_id, item in presented.items():
        if isinstance(item, PassportPair):
            snap[layer_id] = PassportPair(
                item.p_gamma.detach().clone(), item.p_beta.detach().clone(),
                provenance="forged",
            )
        else:
            snap[layer_id] = ScalePair(item.gamma.detach().clone(), item.beta.detach().clone())
    return snap


def attack_reverse_passport(model, train_data, test_set, budget, mode="passport"):
    """fake2: with frozen weights and training data, optimize free passports
    (or, in the stronger variant, raw scale/shift vectors) for accuracy."""
    frozen = _frozen_clone(model)
    leaves, presented = _attack_leaves(frozen, mode, budget.seed)
    params = [t for pair in leaves.values() for t in pair]
    optimizer = torch.optim.Adam(params, lr=budget.lr)
    rng = np.random.default_rng(budget.seed)
    n = len(train_data)
    best_accuracy = evaluate_accuracy(frozen, test_set, passports=presented)
    best = _snapshot(presented)
    trace = [best_accuracy]
    batch = 64
    for step in range(budget.iterations):
        idx = torch.from_numpy(rng.integers(0, n, size=batch))
        optimizer.zero_grad()
        loss = F.cross_entropy(
            frozen(train_data.images[idx], passports=presented), train_data.labels[idx]
        )
        loss.backward()
        optimizer.step()
        if (step + 1) % budget.eval_every == 0 or step == budget.iterations - 1:
            accuracy = evaluate_accuracy(frozen, test_set, passports=presented)
            trace.append(accuracy)
            if accuracy > best_accuracy:
                best_accuracy = accuracy
                best = _snapshot(presented)
    if mode == "passport":
        forged = PassportSet(best, generation_seed=budget.seed,
                             model_fingerprint=model.fingerprint())
    else:
        forged = best
    outcome = AttackOutcome(
        kind="reverse-passport",
        success=True,
        metrics={"best_accuracy": best_accuracy, "trace": trace,
                 "iterations": budget.iterations},
        config={"budget": asdict(budget), "mode": mode},
    )
    return forged, outcome


def attack_flip_signs(model, passports, signature, fraction, test_set, layers=None,
                      seed=0):
    """Evaluate with `fraction` of scale-factor signs inverted in `layers`."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"flip fraction must be in [0, 1], got {fraction}")
    if layers is None:
        layers = model.passport_layer_ids
    for layer_id in layers:
        if layer_id not in model.passport_layer_ids:
            raise ConfigError(f"{layer_id!r} is not a passport layer")
    rng = np.random.default_rng(seed)
    masks = {}
    for layer_id in layers:
        c = model.blocks[layer_id].out_channels
        k = int(round(fraction * c))
        mask = torch.ones(c)
        if k:
            idx = torch.from_numpy(rng.choice(c, size=k, replace=False))
            mask[idx] = -1.0
        masks[layer_id] = mask
    return evaluate_accuracy(model, test_set, passports=passports, sign_masks=masks)


def attack_insider(model, original_passports, signature, flip_fraction, train_data,
                   test_set, budget, lambda_sign=10.0):
    """fake3: flip a fraction of the known signs, then re-optimize passports
    under the modified sign constraint (starting from the stolen originals)."""
    modified = flip_signature(signature, flip_fraction, seed=budget.seed)
    frozen = _frozen_clone(model)
    leaves, presented = _attack_leaves(
        frozen, "passport", budget.seed, init_passports=original_passports
    )
    params = [t for pair in leaves.values() for t in pair]
    optimizer = torch.optim.Adam(params, lr=budget.lr)
    rng = np.random.default_rng(budget.seed)
    n = len(train_data)

    def measure():
        accuracy = evaluate_accuracy(frozen, test_set, passports=presented)
        match = detect_signature(frozen, presented, reference=modified).match_rate
        return accuracy, match

    accuracy, match = measure()
    best_valid = accuracy if match == 1.0 else None
    best = _snapshot(presented) if match == 1.0 else None
    for step in range(budget.iterations):
        idx = torch.from_numpy(rng.integers(0, n, size=64))
        optimizer.zero_grad()
        loss = F.cross_entropy(
            frozen(train_data.images[idx], passports=presented), train_data.labels[idx]
        )
        loss = loss + lambda_sign * model_sign_loss(frozen, presented, modified)
        loss.backward()
        optimizer.step()
        if (step + 1) % budget.eval_every == 0 or step == budget.iterations - 1:
            accuracy, match = measure()
            if match == 1.0 and (best_valid is None or accuracy > best_valid):
                best_valid = accuracy
                best = _snapshot(presented)
    constrained = best_valid is not None
    final_accuracy = best_valid if constrained else accuracy
    forged = PassportSet(
        best if constrained else _snapshot(presented),
        generation_seed=budget.seed,
        model_fingerprint=model.fingerprint(),
    )
    outcome = AttackOutcome(
        kind="insider",
        success=constrained,
        metrics={
            "accuracy": final_accuracy,
            "sign_match_achieved": constrained,
            "flip_fraction": flip_fraction,
            "forged_payload": modified.ascii_payload,
        },
        config={"budget": asdict(budget), "lambda_sign": lambda_sign},
    )
    return forged, outcome


# ---------------------------------------------------------------------------
# Removal attacks
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 8
    lr: float = 0.001
    batch_size: int = 64
    seed: int = 0
    head_seed: int = 0


@dataclass
class FinetuneResult:
    model: object
    new_task_accuracy: float
    signature_detection: float
    trigger_detection: float | None
    history: list


def removal_finetune(model, passports, signature, new_train, new_test, config,
                     trigger_set=None):
    """Transfer the model to a new task, then re-check ownership evidence.

    The head is replaced for the new class count and all weights fine-tune.
    v1 models fine-tune through the passport branch (passports are distributed
    with them); v2/v3 fine-tune the public branch.
    """
    uses_passports = model.scheme == "v1"
    branch_passports = passports if uses_passports else None
    if config.epochs == 0:
        return FinetuneResult(
            model=model,
            new_task_accuracy=evaluate_accuracy(model, new_test, passports=branch_passports),
            signature_detection=detect_signature(model, passports, reference=signature).match_rate,
            trigger_detection=(
                trigger_detection_rate(model, trigger_set, passports=branch_passports)
                if trigger_set is not None else None
            ),
            history=[],
        )
    tuned = copy.deepcopy(model)
    tuned.reset_head(new_train.num_classes, seed=config.head_seed)
    train_cfg = SchemeConfig(
        scheme="v1", epochs=config.epochs, batch_size=config.batch_size,
        lr=config.lr, lr_milestones=(), lambda_r=0.0, seed=config.seed,
    )

    def loss_fn(m, x, y):
        return F.cross_entropy(m(x, passports=branch_passports), y)

    result = run_training(tuned, new_train, train_cfg, loss_fn)
    return FinetuneResult(
        model=tuned,
        new_task_accuracy=evaluate_accuracy(tuned, new_test, passports=branch_passports),
        signature_detection=detect_signature(tuned, passports, reference=signature).match_rate,
        trigger_detection=(
            trigger_detection_rate(tuned, trigger_set, passports=branch_passports)
            if trigger_set is not None else None
        ),
        history=result.history,
    )


def global_prune_masks(model, rate):
    """Class-blind masks: keep=False on the globally smallest |w| fraction.

    Stable sorting makes masks nested across rates (monotone pruning).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"pruning rate must be in [0, 1), got {rate}")
    named = [
        (f"{name}.weight", module.weight)
        for name, module in model.named_modules()
        if isinstance(module, (torch.nn.Conv2d, torch.nn.Linear))
    ]
    flat = torch.cat([w.detach().abs().reshape(-1) for _, w in named])
    k = int(rate * flat.numel())
    masks = {name: torch.ones_like(w, dtype=torch.bool) for name, w in named}
    if k == 0:
        return masks
    order = torch.sort(flat, stable=True).indices[:k]
    drop = torch.zeros(flat.numel(), dtype=torch.bool)
    drop[order] = True
    offset = 0
    for name, w in named:
        n = w.numel()
        masks[name] = ~drop[offset:offset + n].reshape(w.shape)
        offset += n
    return masks


def removal_prune(model, rate, passports=None, signature=None, test_set=None):
    """Zero the smallest-magnitude fraction of conv/linear weights globally."""
    masks = global_prune_masks(model, rate)
    pruned = copy.deepcopy(model)
    for name, module in pruned.named_modules():
        if isinstance(module, (torch.nn.Conv2d, torch.nn.Linear)):
            module.weight.data.mul_(masks[f"{name}.weight"].to(module.weight.dtype))
    metrics = {"rate": rate}
    eval_passports = passports if model.scheme == "v1" else None
    if test_set is not None:
        metrics["accuracy"] = evaluate_accuracy(pruned, test_set, passports=eval_passports)
    if passports is not None and signature is not None:
        metrics["signature_detection"] = detect_signature(
            pruned, passports, reference=signature
        ).match_rate
    return pruned, metrics


def prune_sweep(model, rates, passports, signature, test_set):
    """Accuracy / detection curve over pruning rates (each from the original)."""
    curve = []
    for rate in rates:
        _, metrics = removal_prune(
            model, rate, passports=passports, signature=signature, test_set=test_set
        )
        curve.append(metrics)
    return curve
