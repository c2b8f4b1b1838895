import numpy as np
import pytest
import torch

from passportnet.errors import ConfigError, PassportShapeError, SchemeError
from passportnet.models import (
    ARCHITECTURES,
    PassportLayer,
    PassportModel,
    ScalePair,
    build_model,
)
from passportnet.passports import gen_random_set
from passportnet.signatures import sign_loss


def bruteforce_conv_mean(weight, passport, stride, padding):
    """Independent loop oracle for Avg(W * P): per-channel spatial mean."""
    weight = np.asarray(weight, dtype=np.float64)
    passport = np.asarray(passport, dtype=np.float64)
    c_out, c_in, kh, kw = weight.shape
    _, h, w = passport.shape
    padded = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    padded[:, padding:padding + h, padding:padding + w] = passport
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    means = np.zeros(c_out)
    for co in range(c_out):
        total = 0.0
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for ci in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            acc += weight[co, ci, a, b] * padded[ci, i * stride + a, j * stride + b]
                total += acc
        means[co] = total / (oh * ow)
    return means


@pytest.mark.parametrize("c_in,c_out,k,stride,pad,size", [
    (1, 1, 2, 1, 0, 4),
    (3, 5, 3, 1, 1, 6),
    (2, 4, 3, 2, 1, 7),
])
def test_gamma_matches_bruteforce_oracle(c_in, c_out, k, stride, pad, size):
    torch.manual_seed(7)
    layer = PassportLayer("conv", c_in, c_out, k, stride, pad, "none", "v1").double()
    p_gamma = torch.randn(c_in, size, size, dtype=torch.float64)
    p_beta = torch.randn(c_in, size, size, dtype=torch.float64)
    gamma, beta = layer.derive_scale_shift((p_gamma, p_beta))
    want_gamma = bruteforce_conv_mean(layer.conv.weight.detach(), p_gamma, stride, pad)
    want_beta = bruteforce_conv_mean(layer.conv.weight.detach(), p_beta, stride, pad)
    np.testing.assert_allclose(gamma.detach().numpy(), want_gamma, rtol=1e-6)
    np.testing.assert_allclose(beta.detach().numpy(), want_beta, rtol=1e-6)


def test_single_channel_gamma_is_plain_mean():
    # random 2x2 kernel, 1-channel passport: gamma == arithmetic mean of conv output
    torch.manual_seed(0)
    layer = PassportLayer("conv", 1, 1, 2, 1, 0, "none", "v1").double()
    p = torch.randn(1, 4, 4, dtype=torch.float64)
    gamma, _ = layer.derive_scale_shift((p, p))
    out = layer.conv(p.unsqueeze(0))
    assert torch.allclose(gamma, out.mean(), rtol=1e-12)


def test_identity_scaling_equals_plain_conv():
    # passport with Avg(W*P_gamma)=1, Avg(W*P_beta)=0 and O=identity
    torch.manual_seed(1)
    layer = PassportLayer("conv", 2, 1, 3, 1, 1, "none", "v1").double()
    base = torch.randn(2, 5, 5, dtype=torch.float64)
    scale, _ = layer.derive_scale_shift((base, base))
    p_gamma = base / scale.item()
    p_beta = torch.zeros_like(base)
    x = torch.randn(3, 2, 5, 5, dtype=torch.float64)
    out = layer.passport_forward(x, (p_gamma, p_beta))
    assert torch.allclose(out, layer.conv(x), atol=1e-10)


def test_scalepair_identity_and_sign_mask():
    torch.manual_seed(2)
    layer = PassportLayer("conv", 3, 4, 3, 1, 1, "none", "v1")
    x = torch.randn(2, 3, 8, 8)
    ident = ScalePair(torch.ones(4), torch.zeros(4))
    assert torch.allclose(layer.passport_forward(x, ident), layer.conv(x))
    gamma = torch.tensor([1.0, -2.0, 0.5, 3.0])
    mask = torch.tensor([1.0, -1.0, -1.0, 1.0])
    flipped = layer.passport_forward(x, ScalePair(gamma * mask, torch.zeros(4)))
    masked = layer.passport_forward(x, ScalePair(gamma, torch.zeros(4)), sign_mask=mask)
    assert torch.allclose(flipped, masked)


def test_scale_shift_is_pure_function_of_weights_and_passport():
    layer = PassportLayer("conv", 3, 6, 3, 1, 1, "batch", "v1")
    p = (torch.randn(3, 6, 6), torch.randn(3, 6, 6))
    g1, b1 = layer.derive_scale_shift(p)
    g2, b2 = layer.derive_scale_shift(p)
    assert torch.equal(g1, g2) and torch.equal(b1, b2)


def test_passport_gradient_matches_central_differences():
    # d(sign_loss(gamma(W)))/dW vs float64 central differences, rel err <= 1e-4
    torch.manual_seed(3)
    layer = PassportLayer("conv", 2, 3, 3, 1, 1, "none", "v1").double()
    p = (torch.randn(2, 5, 5, dtype=torch.float64), torch.randn(2, 5, 5, dtype=torch.float64))
    b = torch.tensor([1.0, -1.0, 1.0], dtype=torch.float64)

    def loss_of(weight):
        old = layer.conv.weight.data.clone()
        layer.conv.weight.data = weight
        with torch.no_grad():
            gamma, _ = layer.derive_scale_shift(p)
            value = float(sign_loss(gamma, b, 0.5))
        layer.conv.weight.data = old
        return value

    gamma, _ = layer.derive_scale_shift(p)
    loss = sign_loss(gamma, b, 0.5)
    loss.backward()
    grad = layer.conv.weight.grad.detach().clone()
    w0 = layer.conv.weight.data.clone()
    eps = 1e-6
    flat = w0.reshape(-1)
    idx = torch.randperm(flat.numel())[:12]
    for i in idx:
        w_plus, w_minus = flat.clone(), flat.clone()
        w_plus[i] += eps
        w_minus[i] -= eps
        fd = (loss_of(w_plus.reshape(w0.shape)) - loss_of(w_minus.reshape(w0.shape))) / (2 * eps)
        got = float(grad.reshape(-1)[i])
        assert got == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_gradients_flow_through_data_and_scale_paths():
    layer = PassportLayer("conv", 2, 3, 3, 1, 1, "none", "v1")
    p = (torch.randn(2, 5, 5), torch.randn(2, 5, 5))
    x = torch.randn(1, 2, 5, 5)
    layer.passport_forward(x, p).sum().backward()
    assert layer.conv.weight.grad is not None
    assert layer.conv.weight.grad.abs().sum() > 0


def test_public_forward_identity_and_v1_rejection():
    layer = PassportLayer("conv", 3, 4, 3, 1, 1, "none", "v2")
    x = torch.randn(2, 3, 6, 6)
    assert torch.allclose(layer.public_forward(x), layer.conv(x))
    v1_layer = PassportLayer("conv", 3, 4, 3, 1, 1, "none", "v1")
    with pytest.raises(SchemeError):
        v1_layer.public_forward(x)


def test_passport_shape_mismatch_is_descriptive():
    layer = PassportLayer("conv2", 16, 32, 3, 1, 1, "batch", "v1")
    with pytest.raises(PassportShapeError, match="conv2"):
        layer.derive_scale_shift((torch.randn(8, 16, 16), torch.randn(8, 16, 16)))
    unpadded = PassportLayer("conv9", 4, 8, 3, 1, 0, "batch", "v1")
    with pytest.raises(PassportShapeError, match="conv9"):
        unpadded.derive_scale_shift((torch.randn(4, 2, 2), torch.randn(4, 2, 2)))


def test_v1_model_requires_passports():
    model = build_model("mininet", "v1", seed=0)
    with pytest.raises(SchemeError):
        model(torch.randn(1, 3, 32, 32))


def test_missing_layer_passport_is_config_error():
    model = build_model("mininet", "v1", seed=0)
    pset = gen_random_set(model, seed=0)
    del pset.pairs["conv3"]
    with pytest.raises(ConfigError, match="conv3"):
        model(torch.randn(1, 3, 32, 32), passports=pset)


def test_build_model_deterministic_per_seed():
    a = build_model("mininet", "v1", seed=11)
    b = build_model("mininet", "v1", seed=11)
    c = build_model("mininet", "v1", seed=12)
    for (ka, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert any(
        not torch.equal(va, vc)
        for va, vc in zip(a.state_dict().values(), c.state_dict().values())
    )


def test_build_model_validation():
    with pytest.raises(ConfigError):
        build_model("resnet99", "v1")
    with pytest.raises(ConfigError):
        build_model("mininet", "v1", passport_layer_ids=("conv7",))
    with pytest.raises(ConfigError):
        PassportModel("mininet", "v9")


def test_scheme_norm_binding():
    assert build_model("mininet", "v1").norm_kind == "batch"
    assert build_model("mininet", "v2").norm_kind == "group"
    assert build_model("mininet", "v3").norm_kind == "group"


def test_alexnet_matches_reference_geometry():
    model = build_model("alexnet_p", "v1", seed=0)
    shapes = {lid: tuple(model.blocks[lid].conv.weight.shape) for lid in model.blocks}
    assert shapes == {
        "conv1": (64, 3, 5, 5),
        "conv2": (192, 64, 5, 5),
        "conv3": (384, 192, 3, 3),
        "conv4": (256, 384, 3, 3),
        "conv5": (256, 256, 3, 3),
    }
    assert model.passport_layer_ids == ("conv3", "conv4", "conv5")
    assert tuple(model.head.weight.shape) == (10, 4096)
    out = model(torch.randn(2, 3, 32, 32), passports=gen_random_set(model, 0))
    assert out.shape == (2, 10)


def test_mininet_default_passports_on_last_two_convs():
    model = build_model("mininet", "v1", seed=0)
    assert model.passport_layer_ids == ("conv2", "conv3")
    assert dict(model.passport_capacities()) == {"conv2": 32, "conv3": 64}


def test_baseline_equivalence_with_public_branch():
    # passport model on the public branch == plain model with affine = public params
    protected = build_model("mininet", "v2", seed=5)
    baseline = build_model("mininet", "v2", passport_layer_ids=(), seed=5)
    state = baseline.state_dict()
    for lid in protected.passport_layer_ids:
        block = protected.blocks[lid]
        state[f"blocks.{lid}.conv.weight"] = block.conv.weight.detach().clone()
        state[f"blocks.{lid}.norm.weight"] = block.public_gamma.detach().clone()
        state[f"blocks.{lid}.norm.bias"] = block.public_beta.detach().clone()
    for lid in set(b for b in baseline.blocks) - set(protected.passport_layer_ids):
        for suffix in ("conv.weight", "norm.weight", "norm.bias"):
            state[f"blocks.{lid}.{suffix}"] = protected.state_dict()[f"blocks.{lid}.{suffix}"]
    state["head.weight"] = protected.head.weight.detach().clone()
    state["head.bias"] = protected.head.bias.detach().clone()
    baseline.load_state_dict(state)
    x = torch.randn(4, 3, 32, 32)
    protected.eval(), baseline.eval()
    assert torch.allclose(protected(x), baseline(x), atol=1e-6)


def test_baseline_model_runs_without_passports():
    # empty passport ids: model runs without passports under every scheme
    for scheme in ("v1", "v2", "v3"):
        model = build_model("mininet", scheme, passport_layer_ids=(), seed=1)
        out = model(torch.randn(2, 3, 32, 32))
        assert out.shape == (2, 10)


def test_conv_input_shapes_cover_all_architectures():
    for name in ARCHITECTURES:
        model = build_model(name, "v1", seed=0)
        shapes = model.conv_input_shapes()
        pset = gen_random_set(model, seed=0)
        for lid, pair in pset.pairs.items():
            assert tuple(pair.p_gamma.shape) == shapes[lid]


def test_reset_head_changes_only_head():
    model = build_model("mininet", "v2", seed=0)
    conv_before = model.blocks["conv1"].conv.weight.detach().clone()
    model.reset_head(7, seed=3)
    assert model.head.out_features == 7
    assert model.num_classes == 7
    assert torch.equal(model.blocks["conv1"].conv.weight, conv_before)
