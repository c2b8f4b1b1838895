import numpy as np
import pytest
import torch

from passportnet.baselines import (
    FeatureWatermark,
    detect_feature_watermark,
    detect_trigger_watermark,
    embed_trigger_watermark,
    extract_feature_bits,
    feature_embed_loss,
    flat_layer_weights,
    load_watermark_key,
    make_feature_watermark,
    save_watermark_key,
)
from passportnet.data import TriggerSet, make_trigger_set
from passportnet.errors import ConfigError
from passportnet.models import build_model
from passportnet.training import SchemeConfig, train_plain


def test_watermark_defaults_to_second_conv():
    model = build_model("mininet", "v1", passport_layer_ids=(), seed=0)
    wm = make_feature_watermark(model, n_bits=64, seed=1)
    assert wm.embed_layer_id == "conv2"
    assert wm.projection.shape == (64, 32 * 16 * 3 * 3)
    assert set(wm.bits.tolist()) <= {0.0, 1.0}


def test_extraction_self_consistency():
    # bits thresholded from the current weights are recovered exactly
    model = build_model("mininet", "v1", passport_layer_ids=(), seed=0)
    wm = make_feature_watermark(model, n_bits=128, seed=2)
    _, extracted = extract_feature_bits(model, wm)
    self_wm = FeatureWatermark(wm.projection, extracted, wm.embed_layer_id)
    assert detect_feature_watermark(model, self_wm) == 1.0


def test_detection_null_model_near_half():
    model = build_model("mininet", "v1", passport_layer_ids=(), seed=3)
    rates = [
        detect_feature_watermark(model, make_feature_watermark(model, 256, seed=s))
        for s in range(5)
    ]
    assert 0.35 <= float(np.mean(rates)) <= 0.65
    assert all(0.0 <= r <= 1.0 for r in rates)


def test_embed_loss_matches_manual_bce():
    model = build_model("mininet", "v1", passport_layer_ids=(), seed=0)
    wm = make_feature_watermark(model, n_bits=16, seed=1)
    with torch.no_grad():
        w = flat_layer_weights(model, wm.embed_layer_id)
        y = torch.sigmoid(wm.projection @ w)
        manual = -float(
            (wm.bits * torch.log(y) + (1 - wm.bits) * torch.log(1 - y)).sum()
        )
    assert float(feature_embed_loss(model, wm)) == pytest.approx(manual, rel=1e-4)


def test_unknown_layer_rejected():
    model = build_model("mininet", "v1", passport_layer_ids=(), seed=0)
    with pytest.raises(ConfigError):
        flat_layer_weights(model, "conv99")
    with pytest.raises(ConfigError):
        detect_feature_watermark(model, torch.randn(4, 4))


def test_empty_trigger_embedding_equals_plain_training(tiny_train):
    cfg = SchemeConfig(scheme="v1", epochs=1, batch_size=64, seed=7)
    a = build_model("mininet", "v1", passport_layer_ids=(), seed=5)
    b = build_model("mininet", "v1", passport_layer_ids=(), seed=5)
    empty = TriggerSet(images=torch.zeros(0, 3, 32, 32), labels=torch.zeros(0, dtype=torch.int64))
    embed_trigger_watermark(a, empty, tiny_train, cfg)
    train_plain(b, tiny_train, SchemeConfig(scheme="v1", epochs=1, batch_size=64, seed=7))
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(va, vb), k


def test_trigger_detection_rate_range(tiny_train):
    model = build_model("mininet", "v1", passport_layer_ids=(), seed=0)
    trigger = make_trigger_set(30, 10, seed=2)
    rate = detect_trigger_watermark(model, trigger)
    assert 0.0 <= rate <= 1.0


def test_watermark_key_round_trip(tmp_path):
    model = build_model("mininet", "v1", passport_layer_ids=(), seed=0)
    wm = make_feature_watermark(model, n_bits=32, seed=4)
    path = tmp_path / "key.ppnc"
    save_watermark_key(wm, path, fingerprint=model.fingerprint())
    loaded = load_watermark_key(path)
    assert torch.equal(loaded.projection, wm.projection)
    assert torch.equal(loaded.bits, wm.bits)
    assert loaded.embed_layer_id == wm.embed_layer_id
    assert loaded.lambda_r == wm.lambda_r
