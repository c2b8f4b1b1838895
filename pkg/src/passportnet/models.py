"""Passport-layer CNNs and their plain baselines.

A passport layer never stores its scale/shift: both are recomputed on every
forward pass from the host convolution kernel and the presented passport,
so wrong passports immediately corrupt inference.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, PassportShapeError, SchemeError

SCHEMES = ("v1", "v2", "v3")
# v1 keeps batch norm; the multi-task schemes need a statistic-free norm,
# so they run group norm instead.
NORM_FOR_SCHEME = {"v1": "batch", "v2": "group", "v3": "group"}
GROUP_NORM_GROUPS = 4


def make_norm(kind, channels, affine):
    if kind == "batch":
        return nn.BatchNorm2d(channels, affine=affine)
    if kind == "group":
        groups = GROUP_NORM_GROUPS if channels % GROUP_NORM_GROUPS == 0 else channels
        return nn.GroupNorm(min(groups, channels), channels, affine=affine)
    if kind == "none":
        return nn.Identity()
    raise ConfigError(f"unknown norm kind {kind!r}")


def _passport_tensors(passport):
    """Accept a PassportPair-like object or a plain (p_gamma, p_beta) tuple."""
    if hasattr(passport, "p_gamma"):
        return passport.p_gamma, passport.p_beta
    p_gamma, p_beta = passport
    return p_gamma, p_beta


@dataclass
class ScalePair:
    """Explicit (gamma, beta) vectors presented in place of a passport.

    Used by attackers who optimize the scale factors directly instead of
    presenting a passport tensor.
    """

    gamma: torch.Tensor  # [C_out]
    beta: torch.Tensor


class PlainBlock(nn.Module):
    """Convolution followed by an affine normalization."""

    def __init__(self, in_channels, out_channels, kernel, stride, padding, norm_kind):
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel, stride=stride, padding=padding, bias=False
        )
        self.norm = make_norm(norm_kind, out_channels, affine=True)

    def forward(self, x):
        return self.norm(self.conv(x))


class PassportLayer(nn.Module):
    """Conv layer whose scale/shift comes from (kernel, passport), not parameters.

    gamma = Avg(W_p * P_gamma) and beta = Avg(W_p * P_beta): the passport is
    pushed through the host kernel with the host stride/padding, then averaged
    over all spatial positions per output channel.  Layers built for v2/v3
    additionally carry learnable public scale/shift vectors used when no
    passport is presented.
    """

    def __init__(self, layer_id, in_channels, out_channels, kernel, stride, padding,
                 norm_kind, scheme):
        super().__init__()
        if scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {scheme!r}")
        self.layer_id = layer_id
        self.scheme = scheme
        self.norm_kind = norm_kind
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel, stride=stride, padding=padding, bias=False
        )
        self.norm = make_norm(norm_kind, out_channels, affine=False)
        if scheme in ("v2", "v3"):
            self.public_gamma = nn.Parameter(torch.ones(out_channels))
            self.public_beta = nn.Parameter(torch.zeros(out_channels))

    @property
    def out_channels(self):
        return self.conv.out_channels

    def check_passport(self, p):
        w = self.conv.weight
        if p.dim() != 3 or p.shape[0] != w.shape[1]:
            raise PassportShapeError(
                f"layer {self.layer_id!r}: passport shape {tuple(p.shape)} does not match "
                f"conv input ({w.shape[1]} channels expected)"
            )
        kh, kw = self.conv.kernel_size
        ph, pw = self.conv.padding
        if p.shape[1] + 2 * ph < kh or p.shape[2] + 2 * pw < kw:
            raise PassportShapeError(
                f"layer {self.layer_id!r}: passport spatial size {tuple(p.shape[1:])} too small "
                f"for kernel {(kh, kw)} with padding {(ph, pw)}"
            )

    def _avg_response(self, p):
        self.check_passport(p)
        out = self.conv(p.to(self.conv.weight.dtype).unsqueeze(0))
        return out.mean(dim=(0, 2, 3))

    def derive_scale_shift(self, passport):
        """Recompute (gamma, beta) from the current kernel and the passport."""
        p_gamma, p_beta = _passport_tensors(passport)
        return self._avg_response(p_gamma), self._avg_response(p_beta)

    def passport_forward(self, x_c, passport, sign_mask=None):
        if isinstance(passport, ScalePair):
            gamma, beta = passport.gamma, passport.beta
        else:
            gamma, beta = self.derive_scale_shift(passport)
        if sign_mask is not None:
            gamma = gamma * sign_mask.to(gamma.dtype)
        y = self.norm(self.conv(x_c))
        return gamma.view(1, -1, 1, 1) * y + beta.view(1, -1, 1, 1)

    def public_forward(self, x_c):
        if self.scheme == "v1":
            raise SchemeError(f"layer {self.layer_id!r}: scheme v1 has no public branch")
        y = self.norm(self.conv(x_c))
        return self.public_gamma.view(1, -1, 1, 1) * y + self.public_beta.view(1, -1, 1, 1)


def passport_forward(layer, x_c, passport, sign_mask=None):
    return layer.passport_forward(x_c, passport, sign_mask=sign_mask)


def public_forward(layer, x_c):
    return layer.public_forward(x_c)


@dataclass(frozen=True)
class ConvSpec:
    layer_id: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    pool_after: bool


@dataclass(frozen=True)
class ArchSpec:
    name: str
    convs: tuple
    head_in: int
    default_passport_ids: tuple


# Desk-scale 3-conv net; 32 + 64 sign slots on its last two convs.
MININET = ArchSpec(
    name="mininet",
    convs=(
        ConvSpec("conv1", 3, 16, 3, 1, 1, True),
        ConvSpec("conv2", 16, 32, 3, 1, 1, True),
        ConvSpec("conv3", 32, 64, 3, 1, 1, True),
    ),
    head_in=64 * 4 * 4,
    default_passport_ids=("conv2", "conv3"),
)

ALEXNET_P = ArchSpec(
    name="alexnet_p",
    convs=(
        ConvSpec("conv1", 3, 64, 5, 1, 2, True),
        ConvSpec("conv2", 64, 192, 5, 1, 2, True),
        ConvSpec("conv3", 192, 384, 3, 1, 1, False),
        ConvSpec("conv4", 384, 256, 3, 1, 1, False),
        ConvSpec("conv5", 256, 256, 3, 1, 1, True),
    ),
    head_in=256 * 4 * 4,
    default_passport_ids=("conv3", "conv4", "conv5"),
)

ARCHITECTURES = {spec.name: spec for spec in (MININET, ALEXNET_P)}


class PassportModel(nn.Module):
    """CNN whose designated conv layers are passport layers.

    Inference with 32x32 RGB inputs.  `passport_layer_ids=()` gives the plain
    (unprotected) baseline of the same architecture.
    """

    def __init__(self, architecture, scheme, passport_layer_ids=None, num_classes=10):
        super().__init__()
        if architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {architecture!r}")
        if scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {scheme!r}")
        arch = ARCHITECTURES[architecture]
        if passport_layer_ids is None:
            passport_layer_ids = arch.default_passport_ids
        passport_layer_ids = tuple(passport_layer_ids)
        known = {c.layer_id for c in arch.convs}
        for layer_id in passport_layer_ids:
            if layer_id not in known:
                raise ConfigError(f"{architecture} has no conv layer {layer_id!r}")
        self.architecture = architecture
        self.scheme = scheme
        self.norm_kind = NORM_FOR_SCHEME[scheme]
        self.passport_layer_ids = passport_layer_ids
        self.num_classes = num_classes
        blocks = OrderedDict()
        for c in arch.convs:
            if c.layer_id in passport_layer_ids:
                blocks[c.layer_id] = PassportLayer(
                    c.layer_id, c.in_channels, c.out_channels, c.kernel, c.stride,
                    c.padding, self.norm_kind, scheme,
                )
            else:
                blocks[c.layer_id] = PlainBlock(
                    c.in_channels, c.out_channels, c.kernel, c.stride, c.padding,
                    self.norm_kind,
                )
        self.blocks = nn.ModuleDict(blocks)
        self.head = nn.Linear(arch.head_in, num_classes)
        self._arch_spec = arch

    def forward(self, x, passports=None, sign_masks=None):
        if passports is None and self.scheme == "v1" and self.passport_layer_ids:
            raise SchemeError("scheme v1 inference requires passports")
        for c in self._arch_spec.convs:
            block = self.blocks[c.layer_id]
            if isinstance(block, PassportLayer):
                if passports is not None:
                    pair = lookup_pair(passports, c.layer_id)
                    mask = sign_masks.get(c.layer_id) if sign_masks else None
                    x = block.passport_forward(x, pair, sign_mask=mask)
                else:
                    x = block.public_forward(x)
            else:
                x = block(x)
            x = F.relu(x)
            if c.pool_after:
                x = F.max_pool2d(x, 2)
        return self.head(x.flatten(1))

    def passport_layers(self):
        """Ordered (layer_id, PassportLayer) pairs."""
        return [(lid, self.blocks[lid]) for lid in self.passport_layer_ids]

    def passport_capacities(self):
        """Sign capacity (C_out) per passport layer, in layer order."""
        return OrderedDict(
            (lid, self.blocks[lid].out_channels) for lid in self.passport_layer_ids
        )

    def conv_input_shapes(self, image_size=32):
        """Spatial input shape (C, H, W) seen by each conv layer at inference."""
        shapes = {}
        size = image_size
        for c in self._arch_spec.convs:
            shapes[c.layer_id] = (c.in_channels, size, size)
            size = (size + 2 * c.padding - c.kernel) // c.stride + 1
            if c.pool_after:
                size //= 2
        return shapes

    def collect_passport_inputs(self, x):
        """Inputs seen by each passported conv during a plain no-passport pass.

        Passport layers run with identity scale/shift (v1) or their public
        branch (v2/v3); used when deriving image passports from feature maps.
        """
        captured = {}
        for c in self._arch_spec.convs:
            block = self.blocks[c.layer_id]
            if isinstance(block, PassportLayer):
                captured[c.layer_id] = x.detach().clone()
                if block.scheme == "v1":
                    x = block.norm(block.conv(x))
                else:
                    x = block.public_forward(x)
            else:
                x = block(x)
            x = F.relu(x)
            if c.pool_after:
                x = F.max_pool2d(x, 2)
        return captured

    def fingerprint(self):
        """Hash of the architecture and passport layer geometry."""
        parts = [self.architecture, str(self.num_classes)]
        for lid in self.passport_layer_ids:
            w = self.blocks[lid].conv.weight
            parts.append(f"{lid}:{'x'.join(str(s) for s in w.shape)}")
        return hashlib.sha256("|".join(parts).encode()).hexdigest()

    def reset_head(self, num_classes, seed=0):
        """Replace the classifier head (used when transferring to a new task)."""
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            head = nn.Linear(self._arch_spec.head_in, num_classes)
            nn.init.normal_(head.weight, std=0.01)
            nn.init.zeros_(head.bias)
        self.head = head.to(next(self.parameters()).dtype)
        self.num_classes = num_classes


def lookup_pair(passports, layer_id):
    mapping = getattr(passports, "pairs", passports)
    try:
        return mapping[layer_id]
    except KeyError:
        raise ConfigError(f"no passport supplied for layer {layer_id!r}") from None


def _init_weights(model):
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.01)
            nn.init.zeros_(module.bias)


def build_model(architecture, scheme, passport_layer_ids=None, seed=0, num_classes=10):
    """Deterministically construct a model; same seed gives bit-identical weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = PassportModel(architecture, scheme, passport_layer_ids, num_classes)
        _init_weights(model)
    return model
