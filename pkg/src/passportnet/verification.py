"""Ownership verification: fidelity evaluation, signature check, fake-passport probe.

A claim is upheld only when the claimed passports keep inference accuracy
within epsilon_f of the target AND every signature bit matches exactly.
Scheme v3 can additionally run a black-box trigger-set pre-check.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field, asdict

import torch

from .errors import ConfigError
from .passports import gen_random_set
from .signatures import detect_signature
from .training import evaluate_accuracy


@dataclass
class FidelityConfig:
    """Threshold test |accuracy - target| <= epsilon_f (accuracy points)."""

    target_accuracy: float
    epsilon_f: float = 3.0
    test_set_ref: str = ""

    def __post_init__(self):
        if self.epsilon_f <= 0:
            raise ConfigError("epsilon_f must be positive")


@dataclass
class FidelityResult:
    passed: bool
    accuracy: float
    target_accuracy: float
    gap: float


def fidelity(model, claimed_passports, test_set, config):
    """Evaluate the model under the claimed passports against the target metric."""
    accuracy = evaluate_accuracy(model, test_set, passports=claimed_passports)
    gap = abs(accuracy - config.target_accuracy)
    return FidelityResult(
        passed=gap <= config.epsilon_f,
        accuracy=accuracy,
        target_accuracy=config.target_accuracy,
        gap=gap,
    )


def trigger_detection_rate(model, trigger_set, passports=None):
    """Fraction of trigger images classified to their designated labels."""
    model.eval()
    with torch.no_grad():
        preds = model(trigger_set.images, passports=passports).argmax(dim=1)
    return float((preds == trigger_set.labels).float().mean())


@dataclass
class VerifyConfig:
    fidelity: FidelityConfig
    trigger_threshold: float = 0.9


@dataclass
class VerificationReport:
    accuracy_with_claimed_passport: float
    baseline_accuracy: float
    epsilon_f: float
    fidelity_pass: bool
    signature_bits: str
    signature_ascii: str
    signature_match_rate: float
    verdict: str
    trigger_detection_rate: float | None = None
    trigger_threshold: float | None = None
    model_fingerprint: str = ""
    scheme: str = ""
    notes: dict = field(default_factory=dict)

    @property
    def owned(self):
        return self.verdict == "owned"

    def to_json(self, indent=2):
        return json.dumps(asdict(self), indent=indent, sort_keys=True)


def verify_ownership(model, passports, signature, test_set, config, trigger_set=None):
    """Run the full verification pipeline and return a report.

    The black-box trigger stage runs first when a trigger set is supplied
    (scheme v3); the white-box stage then checks fidelity plus exact
    signature match.
    """
    trigger_rate = None
    trigger_ok = True
    if model.scheme == "v3" and trigger_set is not None and len(trigger_set) == 0:
        raise ConfigError("scheme v3 black-box verification needs a non-empty trigger set")
    if trigger_set is not None and len(trigger_set):
        # black-box: only model predictions on trigger images are queried
        # (a v1 model is deployed with its passports, so they are part of it)
        deployed = passports if model.scheme == "v1" else None
        trigger_rate = trigger_detection_rate(model, trigger_set, passports=deployed)
        trigger_ok = trigger_rate >= config.trigger_threshold

    fid = fidelity(model, passports, test_set, config.fidelity)
    detection = detect_signature(model, passports, reference=signature)
    owned = fid.passed and detection.match_rate == 1.0 and trigger_ok
    return VerificationReport(
        accuracy_with_claimed_passport=fid.accuracy,
        baseline_accuracy=config.fidelity.target_accuracy,
        epsilon_f=config.fidelity.epsilon_f,
        fidelity_pass=fid.passed,
        signature_bits=detection.bitstring,
        signature_ascii=detection.ascii,
        signature_match_rate=detection.match_rate,
        verdict="owned" if owned else "not-owned",
        trigger_detection_rate=trigger_rate,
        trigger_threshold=config.trigger_threshold if trigger_rate is not None else None,
        model_fingerprint=model.fingerprint(),
        scheme=model.scheme,
        notes={"test_set": getattr(test_set, "name", ""), "test_size": len(test_set)},
    )


@dataclass
class ProbeStats:
    n_fake: int
    accuracies: list
    gaps: list
    target_accuracy: float

    @property
    def mean_accuracy(self):
        return statistics.fmean(self.accuracies) if self.accuracies else float("nan")

    @property
    def max_accuracy(self):
        return max(self.accuracies) if self.accuracies else float("nan")


def noninvertibility_probe(model, test_set, target_accuracy, n_fake=50, seed=0):
    """Accuracy distribution under `n_fake` random passports (default 50)."""
    accuracies = []
    for i in range(n_fake):
        fake = gen_random_set(model, seed=seed + i)
        accuracies.append(evaluate_accuracy(model, test_set, passports=fake))
    gaps = [target_accuracy - a for a in accuracies]
    return ProbeStats(
        n_fake=n_fake, accuracies=accuracies, gaps=gaps, target_accuracy=target_accuracy
    )
