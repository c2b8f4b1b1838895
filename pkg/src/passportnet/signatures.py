"""Sign-coded signatures: the hinge sign loss, ASCII encoding and detection.

Conventions (fixed globally): each character is 8 bits MSB-first, bit 1 maps
to sign +1 and bit 0 to sign -1; bits are laid out layer by layer in passport
layer order; channels beyond the payload carry seeded random padding signs
that are part of the signature, so exact-match verification covers all bits.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CapacityError
from .models import lookup_pair

DEFAULT_GAMMA0 = 0.1


def sign_loss(gamma, b, gamma0=DEFAULT_GAMMA0):
    """Hinge penalty sum(max(gamma0 - gamma_i * b_i, 0)).

    Zero exactly when every gamma_i has the designated sign with magnitude
    at least gamma0.
    """
    gamma = torch.as_tensor(gamma)
    b = torch.as_tensor(b, dtype=gamma.dtype, device=gamma.device)
    if gamma.shape != b.shape:
        raise ValueError(f"gamma has {tuple(gamma.shape)} entries, signs have {tuple(b.shape)}")
    if not torch.all(b.abs() == 1):
        raise ValueError("sign vector entries must be -1 or +1")
    if gamma0 <= 0:
        raise ValueError("gamma0 must be positive")
    return torch.clamp(gamma0 - gamma * b, min=0).sum()


def ascii_to_signs(payload):
    """MSB-first 8-bit encoding; bit 1 -> +1, bit 0 -> -1."""
    signs = []
    for ch in payload:
        code = ord(ch)
        if code > 127:
            raise ValueError(f"non-ASCII character {ch!r} in payload")
        signs.extend(1 if (code >> shift) & 1 else -1 for shift in range(7, -1, -1))
    return np.asarray(signs, dtype=np.float32)


def signs_to_ascii(signs, n_chars=None):
    """Decode +/- signs back to characters (positive sign reads as bit 1)."""
    signs = np.asarray(signs).reshape(-1)
    if n_chars is None:
        n_chars = len(signs) // 8
    chars = []
    for i in range(n_chars):
        byte = 0
        for s in signs[8 * i:8 * i + 8]:
            byte = (byte << 1) | (1 if s > 0 else 0)
        chars.append(chr(byte))
    return "".join(chars)


@dataclass
class Signature:
    """Designated per-layer sign vectors plus the ASCII payload they encode."""

    layer_signs: "OrderedDict[str, torch.Tensor]"
    ascii_payload: str
    gamma0: float = DEFAULT_GAMMA0

    @property
    def total_bits(self):
        return sum(int(v.numel()) for v in self.layer_signs.values())

    def concat_signs(self):
        return torch.cat([v.reshape(-1) for v in self.layer_signs.values()])

    @property
    def padding_signs(self):
        """Filler signs on channels beyond the payload."""
        return self.concat_signs()[8 * len(self.ascii_payload):]

    def decoded_payload(self):
        """Recompute the payload from the stored signs (round-trip check)."""
        return signs_to_ascii(self.concat_signs().numpy(), n_chars=len(self.ascii_payload))


def encode_signature(payload, capacities, gamma0=DEFAULT_GAMMA0, seed=0):
    """Lay a payload out over per-layer sign capacities, padding the rest.

    `capacities` maps layer_id -> channel count in passport layer order.
    """
    total = sum(capacities.values())
    if 8 * len(payload) > total:
        raise CapacityError(
            f"payload needs {8 * len(payload)} bits but layers provide only {total}"
        )
    payload_signs = ascii_to_signs(payload)
    n_pad = total - len(payload_signs)
    rng = np.random.default_rng(seed)
    padding = (rng.integers(0, 2, size=n_pad) * 2 - 1).astype(np.float32)
    signs = np.concatenate([payload_signs, padding])
    layer_signs = OrderedDict()
    offset = 0
    for layer_id, capacity in capacities.items():
        layer_signs[layer_id] = torch.from_numpy(signs[offset:offset + capacity].copy())
        offset += capacity
    return Signature(layer_signs=layer_signs, ascii_payload=payload, gamma0=gamma0)


def flip_signature(signature, fraction, seed=0):
    """Copy of `signature` with `fraction` of all bits flipped (seeded choice).

    The payload of the result is whatever the flipped bits decode to.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"flip fraction must be in [0, 1], got {fraction}")
    signs = signature.concat_signs().numpy().copy()
    k = int(round(fraction * len(signs)))
    if k:
        idx = np.random.default_rng(seed).choice(len(signs), size=k, replace=False)
        signs[idx] = -signs[idx]
    layer_signs = OrderedDict()
    offset = 0
    for layer_id, old in signature.layer_signs.items():
        layer_signs[layer_id] = torch.from_numpy(
            signs[offset:offset + old.numel()].astype(np.float32)
        )
        offset += old.numel()
    flipped = Signature(
        layer_signs=layer_signs,
        ascii_payload=signature.ascii_payload,
        gamma0=signature.gamma0,
    )
    flipped.ascii_payload = signs_to_ascii(signs, n_chars=len(signature.ascii_payload))
    return flipped


def model_sign_loss(model, passports, signature):
    """Sum the sign loss over every passport layer of `model`."""
    total = None
    for layer_id, layer in model.passport_layers():
        gamma, _ = layer.derive_scale_shift(lookup_pair(passports, layer_id))
        term = sign_loss(gamma, signature.layer_signs[layer_id], signature.gamma0)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


@dataclass
class DetectionResult:
    layer_bits: "OrderedDict[str, np.ndarray]"
    bitstring: str
    ascii: str
    match_rate: float | None


def detect_signature(model, passports, reference=None):
    """Read gamma signs off the model under `passports` and decode them.

    With a `reference` signature, `match_rate` is the fraction of all bits
    (payload plus padding) that agree; ownership claims require 1.0.
    """
    layer_bits = OrderedDict()
    detected_signs = []
    with torch.no_grad():
        for layer_id, layer in model.passport_layers():
            gamma, _ = layer.derive_scale_shift(lookup_pair(passports, layer_id))
            signs = torch.where(gamma > 0, 1.0, -1.0)
            detected_signs.append(signs)
            layer_bits[layer_id] = (signs.numpy() > 0).astype(np.int64)
    signs = torch.cat(detected_signs) if detected_signs else torch.zeros(0)
    bits = (signs.numpy() > 0).astype(np.int64)
    bitstring = "".join(str(b) for b in bits)
    match_rate = None
    n_chars = None
    if reference is not None:
        ref = reference.concat_signs()
        if ref.numel() != signs.numel():
            raise ValueError(
                f"reference signature has {ref.numel()} bits, model exposes {signs.numel()}"
            )
        match_rate = float((ref == signs).float().mean()) if ref.numel() else 1.0
        n_chars = len(reference.ascii_payload)
    ascii_text = signs_to_ascii(signs.numpy(), n_chars=n_chars)
    return DetectionResult(
        layer_bits=layer_bits, bitstring=bitstring, ascii=ascii_text, match_rate=match_rate
    )
