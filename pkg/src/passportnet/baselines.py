"""Reference watermarking baselines that ambiguity attacks are mounted against.

Feature-based: a random projection of one conv layer's flattened kernels is
driven through a sigmoid onto target bits via a binary-cross-entropy
regularizer.  Trigger-set based: designated-label images co-trained into the
classifier.  Both verify without any accuracy dependence on the key, which
is exactly the invertibility the attacks exploit.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import TriggerSet
from .errors import ConfigError
from .serialization import load_container, save_container
from .training import run_training

DEFAULT_WATERMARK_BITS = 256


@dataclass
class FeatureWatermark:
    """Projection key X, target bits b and the host layer they bind to."""

    projection: torch.Tensor  # [T, M]
    bits: torch.Tensor  # [T] in {0, 1}
    embed_layer_id: str
    lambda_r: float = 0.01


def flat_layer_weights(model, layer_id):
    """Flattened kernel of one conv layer (the watermark carrier w)."""
    if layer_id not in model.blocks:
        raise ConfigError(f"model has no conv layer {layer_id!r}")
    return model.blocks[layer_id].conv.weight.reshape(-1)


def make_feature_watermark(model, n_bits=DEFAULT_WATERMARK_BITS, embed_layer_id=None,
                           seed=0, lambda_r=0.01):
    """Random gaussian projection over the second conv layer by default."""
    if embed_layer_id is None:
        embed_layer_id = list(model.blocks)[1]
    m = flat_layer_weights(model, embed_layer_id).numel()
    gen = torch.Generator().manual_seed(seed)
    projection = torch.randn(n_bits, m, generator=gen)
    bits = torch.randint(0, 2, (n_bits,), generator=gen).float()
    return FeatureWatermark(projection, bits, embed_layer_id, lambda_r=lambda_r)


def extract_feature_bits(model, wm):
    """y_j = sigmoid(X_j . w); bits threshold at 0.5."""
    w = flat_layer_weights(model, wm.embed_layer_id)
    y = torch.sigmoid(wm.projection.to(w.dtype) @ w)
    return y, (y > 0.5).float()


def feature_embed_loss(model, wm):
    """Binary cross entropy between extracted features and the target bits."""
    w = flat_layer_weights(model, wm.embed_layer_id)
    logits = wm.projection.to(w.dtype) @ w
    return F.binary_cross_entropy_with_logits(
        logits, wm.bits.to(w.dtype), reduction="sum"
    )


def detect_feature_watermark(model, projection, bits=None, embed_layer_id=None):
    """Fraction of extracted bits matching the designated ones.

    Accepts either a FeatureWatermark or explicit (projection, bits, layer).
    """
    if isinstance(projection, FeatureWatermark):
        wm = projection
    else:
        if bits is None or embed_layer_id is None:
            raise ConfigError("raw projections need bits and embed_layer_id")
        wm = FeatureWatermark(projection, bits, embed_layer_id)
    _, extracted = extract_feature_bits(model, wm)
    return float((extracted == wm.bits.to(extracted.dtype)).float().mean())


def embed_feature_watermark(model, wm, data, config):
    """Train the task jointly with the embedding regularizer."""

    def loss_fn(m, x, y):
        return F.cross_entropy(m(x), y) + wm.lambda_r * feature_embed_loss(m, wm)

    return run_training(model, data, config, loss_fn)


def embed_trigger_watermark(model, trigger_set, data, config):
    """Co-train designated-label trigger images with the task."""
    if trigger_set is None or len(trigger_set) == 0:
        return run_training(
            model, data, config, lambda m, x, y: F.cross_entropy(m(x), y)
        )

    def loss_fn(m, x, y):
        return F.cross_entropy(m(x), y)

    return run_training(model, data, config, loss_fn, trigger_set=trigger_set)


def detect_trigger_watermark(model, trigger_set):
    """Fraction of trigger images classified to their designated labels."""
    model.eval()
    with torch.no_grad():
        preds = model(trigger_set.images).argmax(dim=1)
    return float((preds == trigger_set.labels).float().mean())


def save_watermark_key(wm, path, fingerprint=None):
    save_container(
        path,
        "watermark_key",
        {"projection": wm.projection.numpy(), "bits": wm.bits.numpy()},
        meta={"embed_layer_id": wm.embed_layer_id, "lambda_r": wm.lambda_r},
        fingerprint=fingerprint,
    )


def load_watermark_key(path):
    box = load_container(path, expected_kind="watermark_key")
    return FeatureWatermark(
        torch.from_numpy(box.arrays["projection"]),
        torch.from_numpy(box.arrays["bits"]),
        embed_layer_id=box.meta["embed_layer_id"],
        lambda_r=box.meta["lambda_r"],
    )
