"""Passport generation, storage and loading.

Three passport flavours: uniform random patterns, feature maps of one fixed
image, and per-layer shuffled feature maps drawn from a pool of N images
(N^L possible combinations for L passport layers).
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, OwnershipFileError, PassportShapeError
from .serialization import load_container, save_container


@dataclass
class PassportPair:
    """Secret (p_gamma, p_beta) tensors for one passport layer."""

    p_gamma: torch.Tensor
    p_beta: torch.Tensor
    provenance: str = "random"  # random | fixed-image | shuffled-image
    source_descriptor: str = ""

    def __post_init__(self):
        if tuple(self.p_gamma.shape) != tuple(self.p_beta.shape):
            raise PassportShapeError(
                f"p_gamma {tuple(self.p_gamma.shape)} and p_beta "
                f"{tuple(self.p_beta.shape)} must have identical shapes"
            )


@dataclass
class PassportSet:
    """Per-layer passports keyed to one model via its fingerprint."""

    pairs: "OrderedDict[str, PassportPair]"
    generation_seed: int = 0
    model_fingerprint: str = ""

    def __getitem__(self, layer_id):
        return self.pairs[layer_id]

    def __contains__(self, layer_id):
        return layer_id in self.pairs

    def layer_ids(self):
        return list(self.pairs)


def _layer_seed(seed, layer_id, slot=""):
    digest = hashlib.sha256(f"{seed}/{layer_id}/{slot}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def gen_random(shape, seed):
    """Uniform i.i.d. passport pair on [-1, 1]; deterministic per seed."""
    rng = np.random.default_rng(seed)
    p_gamma = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
    p_beta = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
    return PassportPair(
        torch.from_numpy(p_gamma), torch.from_numpy(p_beta), provenance="random"
    )


def gen_random_set(model, seed):
    """Random passports for every passport layer of `model`."""
    shapes = model.conv_input_shapes()
    pairs = OrderedDict()
    for layer_id in model.passport_layer_ids:
        pairs[layer_id] = gen_random(shapes[layer_id], _layer_seed(seed, layer_id))
    return PassportSet(pairs, generation_seed=seed, model_fingerprint=model.fingerprint())


def normalize_map(t):
    """Zero-mean/unit-std standardization applied to collected feature maps.

    Raw post-ReLU maps are non-negative, which couples the derived scale and
    shift and destabilizes embedding; standardizing each map removes that.
    """
    return (t - t.mean()) / (t.std() + 1e-6)


def gen_image_passports(model, images, mode="shuffled", seed=0):
    """Derive passports from the feature maps `images` produce inside `model`.

    fixed: the first image's maps are used for every layer and both slots.
    shuffled: one of the N maps is drawn independently per layer for the
    gamma and beta slots.  Selected maps are standardized (see normalize_map).
    """
    if images.dim() != 4 or images.shape[0] < 1:
        raise ConfigError("need a [N, C, H, W] batch with N >= 1 images")
    first_conv = next(iter(model.blocks.values())).conv
    if images.shape[1] != first_conv.in_channels:
        raise ConfigError(
            f"images have {images.shape[1]} channels, model input layer expects "
            f"{first_conv.in_channels}"
        )
    with torch.no_grad():
        feature_maps = model.collect_passport_inputs(images)
    n = images.shape[0]
    rng = np.random.default_rng(_layer_seed(seed, "image-passports"))
    pairs = OrderedDict()
    for layer_id in model.passport_layer_ids:
        maps = feature_maps[layer_id]  # [N, C, H, W]
        if mode == "fixed":
            i_gamma = i_beta = 0
        elif mode == "shuffled":
            i_gamma = int(rng.integers(n))
            i_beta = int(rng.integers(n))
        else:
            raise ConfigError(f"unknown image-passport mode {mode!r}")
        pairs[layer_id] = PassportPair(
            normalize_map(maps[i_gamma]),
            normalize_map(maps[i_beta]),
            provenance=f"{mode}-image",
            source_descriptor=f"{layer_id}:gamma={i_gamma},beta={i_beta}",
        )
    return PassportSet(pairs, generation_seed=seed, model_fingerprint=model.fingerprint())


def save_passports(pset, path, signature=None):
    """Write a passport set (and optionally its signature) to a container file."""
    arrays = {}
    layer_meta = []
    for layer_id, pair in pset.pairs.items():
        arrays[f"{layer_id}/p_gamma"] = pair.p_gamma.detach().cpu().numpy()
        arrays[f"{layer_id}/p_beta"] = pair.p_beta.detach().cpu().numpy()
        layer_meta.append(
            {
                "layer_id": layer_id,
                "provenance": pair.provenance,
                "source_descriptor": pair.source_descriptor,
            }
        )
    meta = {"generation_seed": pset.generation_seed, "layers": layer_meta}
    if signature is not None:
        for layer_id, signs in signature.layer_signs.items():
            arrays[f"signature/{layer_id}"] = signs.detach().cpu().numpy()
        meta["signature"] = {
            "ascii_payload": signature.ascii_payload,
            "gamma0": signature.gamma0,
            "layer_order": list(signature.layer_signs),
        }
    save_container(
        path, "passport_set", arrays, meta=meta, fingerprint=pset.model_fingerprint
    )


def load_passports_with_signature(path, model=None):
    """Load (PassportSet, Signature | None); verifies fingerprint against `model`."""
    from .signatures import Signature  # local import avoids a cycle

    box = load_container(path, expected_kind="passport_set")
    if model is not None and box.fingerprint != model.fingerprint():
        raise OwnershipFileError(
            f"{path}: passport file fingerprint {box.fingerprint[:12]}... does not match "
            f"model {model.fingerprint()[:12]}..."
        )
    pairs = OrderedDict()
    for entry in box.meta["layers"]:
        layer_id = entry["layer_id"]
        pairs[layer_id] = PassportPair(
            torch.from_numpy(box.arrays[f"{layer_id}/p_gamma"]),
            torch.from_numpy(box.arrays[f"{layer_id}/p_beta"]),
            provenance=entry["provenance"],
            source_descriptor=entry["source_descriptor"],
        )
    pset = PassportSet(
        pairs,
        generation_seed=box.meta["generation_seed"],
        model_fingerprint=box.fingerprint or "",
    )
    signature = None
    if "signature" in box.meta:
        sig_meta = box.meta["signature"]
        layer_signs = OrderedDict(
            (lid, torch.from_numpy(box.arrays[f"signature/{lid}"]))
            for lid in sig_meta["layer_order"]
        )
        signature = Signature(
            layer_signs=layer_signs,
            ascii_payload=sig_meta["ascii_payload"],
            gamma0=sig_meta["gamma0"],
        )
    return pset, signature


def load_passports(path, model=None):
    pset, _ = load_passports_with_signature(path, model=model)
    return pset
