"""Experiment harness CLI.

Verbs: train | verify | attack | report | probe.  Exit codes: 0 success,
1 usage error, 2 runtime error, 3 verification returned not-owned.
Every randomized command takes --seed; --deterministic pins thread count and
global seeds so reruns of a stored config reproduce results bit-for-bit.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, attacks, baselines, data, passports, results, signatures
from .errors import ConfigError, PassportNetError
from .models import build_model
from .training import (
    SchemeConfig,
    evaluate_accuracy,
    load_checkpoint,
    save_checkpoint,
    train_multitask,
    train_plain,
    train_v1,
)
from .verification import (
    FidelityConfig,
    VerifyConfig,
    noninvertibility_probe,
    verify_ownership,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_NOT_OWNED = 3

DEFAULT_SIGNATURE_TEXT = "net-owner"
ATTACK_KINDS = (
    "forge-feature", "forge-trigger", "random-passport", "reverse-passport",
    "insider", "flip-signs", "finetune", "prune",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_file(path):
    """Flat UTF-8 key = value document; '#' starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = _parse_value(value)
    return values


def _add_common(parser):
    parser.add_argument("--config", help="flat key=value config file (flags override)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--runs-dir", default="runs", help="append-only results store")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded, globally seeded execution")
    parser.add_argument("--dataset", default="synthetic",
                        choices=("synthetic", "synthetic-b", "cifar10"))
    parser.add_argument("--train-size", type=int, default=data.DEFAULT_TRAIN_SIZE)
    parser.add_argument("--test-size", type=int, default=data.DEFAULT_TEST_SIZE)
    parser.add_argument("--data-root", default=None, help="cache dir for downloaded datasets")


def build_parser():
    parser = _Parser(prog="passportnet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    p = sub.add_parser("train", help="train a baseline or passport model")
    _add_common(p)
    p.add_argument("--arch", default="mininet", choices=("mininet", "alexnet_p"))
    p.add_argument("--scheme", default="v1", choices=("v1", "v2", "v3"))
    p.add_argument("--baseline", action="store_true",
                   help="train the unprotected baseline (no passport layers)")
    p.add_argument("--passport-layers", default=None,
                   help="comma-separated conv ids; default: architecture standard")
    p.add_argument("--passport-mode", default="shuffled",
                   choices=("shuffled", "fixed", "random"))
    p.add_argument("--passport-images", type=int, default=20)
    p.add_argument("--signature-text", default=DEFAULT_SIGNATURE_TEXT)
    p.add_argument("--gamma0", type=float, default=0.1)
    p.add_argument("--lambda-r", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--trigger-size", type=int, default=100)
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    p.set_defaults(func=cmd_train)
    subparsers["train"] = p

    p = sub.add_parser("verify", help="verify ownership of a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True, help="checkpoint container")
    p.add_argument("--passports", required=True, help="passport container (with signature)")
    p.add_argument("--trigger", default=None, help="trigger-set container for v3 black-box stage")
    p.add_argument("--target-accuracy", type=float, default=None,
                   help="fidelity target; default: accuracy recorded at train time")
    p.add_argument("--epsilon-f", type=float, default=3.0)
    p.add_argument("--trigger-threshold", type=float, default=0.9)
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(func=cmd_verify)
    subparsers["verify"] = p

    p = sub.add_parser("attack", help="run one attack against a checkpoint")
    _add_common(p)
    p.add_argument("--kind", required=True, choices=ATTACK_KINDS)
    p.add_argument("--model", required=True)
    p.add_argument("--passports", default=None)
    p.add_argument("--budget-fraction", type=float, default=0.05,
                   help="attack compute as a fraction of original training")
    p.add_argument("--attack-lr", type=float, default=0.01)
    p.add_argument("--n-fake", type=int, default=50)
    p.add_argument("--flip-fraction", type=float, default=0.1)
    p.add_argument("--rate", type=float, default=0.6, help="pruning rate")
    p.add_argument("--rates", default=None, help="comma list for a pruning sweep")
    p.add_argument("--mode", default="passport", choices=("passport", "gamma_beta"))
    p.add_argument("--finetune-epochs", type=int, default=8)
    p.add_argument("--finetune-lr", type=float, default=0.001)
    p.add_argument("--wm-bits", type=int, default=baselines.DEFAULT_WATERMARK_BITS)
    p.add_argument("--trigger", default=None, help="trigger-set container (finetune check)")
    p.add_argument("--eta", type=float, default=0.04)
    p.add_argument("--n-base", type=int, default=20)
    p.set_defaults(func=cmd_attack)
    subparsers["attack"] = p

    p = sub.add_parser("probe", help="non-invertibility probe with random passports")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--n-fake", type=int, default=50)
    p.add_argument("--target-accuracy", type=float, default=None)
    p.set_defaults(func=cmd_probe)
    subparsers["probe"] = p

    p = sub.add_parser("report", help="aggregate run records into tables and plots")
    p.add_argument("--config", help="flat key=value config file (flags override)")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    subparsers["report"] = p

    return parser, subparsers


def parse_args(argv):
    parser, subparsers = build_parser()
    peek = _Parser(add_help=False)
    peek.add_argument("--config", default=None)
    known, _ = peek.parse_known_args(argv)
    if known.config:
        overrides = parse_config_file(known.config)
        valid = set()
        for sp in subparsers.values():
            valid.update(a.dest for a in sp._actions)
        unknown = sorted(set(overrides) - valid)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for sp in subparsers.values():
            sp.set_defaults(**{k: v for k, v in overrides.items()
                               if k in {a.dest for a in sp._actions}})
    return parser.parse_args(argv)


def _apply_determinism(args):
    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)


def _load_sets(args):
    train = data.load_dataset(args.dataset, "train", n=args.train_size, seed=args.seed,
                              root=args.data_root)
    test = data.load_dataset(args.dataset, "test", n=args.test_size, seed=args.seed,
                             root=args.data_root)
    return train, test


def _record(args, command, config, metrics, artifacts=None):
    run_dir = results.new_run_dir(args.runs_dir, config)
    record = {
        "command": command,
        "config": config,
        "metrics": metrics,
        "artifacts": artifacts or {},
        "wall_clock_sec": round(time.time() - args._t0, 2),
        "versions": {
            "passportnet": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    path = results.write_record(run_dir, record)
    return run_dir, path


def save_trigger_set(trigger, path):
    from .serialization import save_container

    save_container(path, "trigger_set", {
        "images": trigger.images.numpy(),
        "labels": trigger.labels.to(torch.float32).numpy(),
    })


def load_trigger_set(path):
    from .serialization import load_container

    box = load_container(path, expected_kind="trigger_set")
    return data.TriggerSet(
        images=torch.from_numpy(box.arrays["images"]),
        labels=torch.from_numpy(box.arrays["labels"]).to(torch.int64),
    )


def cmd_train(args):
    layer_ids = None
    if args.baseline:
        layer_ids = ()
    elif args.passport_layers:
        layer_ids = tuple(s.strip() for s in args.passport_layers.split(",") if s.strip())
    config = SchemeConfig.for_scheme(
        args.scheme, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        lambda_r=args.lambda_r, gamma0=args.gamma0, seed=args.seed,
        deterministic=args.deterministic,
    )
    model = build_model(args.arch, args.scheme, passport_layer_ids=layer_ids,
                        seed=args.seed)
    if args.dry_run:
        print(json.dumps({"status": "ok", "config": config.to_dict(),
                          "architecture": args.arch,
                          "passport_layers": list(model.passport_layer_ids)}))
        return EXIT_OK

    train_set, test_set = _load_sets(args)
    trigger = None
    pset = None
    signature = None
    if model.passport_layer_ids:
        if args.scheme == "v3":
            trigger = data.make_trigger_set(args.trigger_size, train_set.num_classes,
                                            seed=args.seed)
        if args.passport_mode == "random":
            pset = passports.gen_random_set(model, seed=args.seed)
        else:
            pool = trigger.images if trigger is not None else train_set.images
            count = min(args.passport_images, pool.shape[0])
            pick = np.random.default_rng(args.seed).choice(pool.shape[0], size=count,
                                                           replace=False)
            pset = passports.gen_image_passports(
                model, pool[torch.from_numpy(pick)], mode=args.passport_mode,
                seed=args.seed,
            )
        signature = signatures.encode_signature(
            args.signature_text, model.passport_capacities(), gamma0=args.gamma0,
            seed=args.seed,
        )

    if not model.passport_layer_ids:
        result = train_plain(model, train_set, config)
        valid_accuracy = evaluate_accuracy(model, test_set)
    elif args.scheme == "v1":
        result = train_v1(model, train_set, pset, signature, config)
        valid_accuracy = evaluate_accuracy(model, test_set, passports=pset)
    else:
        result = train_multitask(model, train_set, pset, signature, config,
                                 trigger_set=trigger)
        valid_accuracy = evaluate_accuracy(model, test_set, passports=pset)

    metrics = {"valid_accuracy": valid_accuracy}
    if model.passport_layer_ids:
        detection = signatures.detect_signature(model, pset, reference=signature)
        metrics["signature_match_rate"] = detection.match_rate
        metrics["signature_ascii"] = detection.ascii
        if model.scheme in ("v2", "v3"):
            metrics["public_accuracy"] = evaluate_accuracy(model, test_set)
        if trigger is not None:
            from .verification import trigger_detection_rate

            metrics["trigger_detection"] = trigger_detection_rate(model, trigger)

    run_config = {"command": "train", **vars_public(args), "scheme_config": config.to_dict()}
    run_dir = results.new_run_dir(args.runs_dir, run_config)
    artifacts = {}
    ckpt = run_dir / "checkpoint.ppnc"
    save_checkpoint(model, ckpt, meta={"valid_accuracy": valid_accuracy,
                                       "dataset": args.dataset,
                                       "scheme_config": config.to_dict()},
                    history=result.history)
    artifacts["checkpoint"] = str(ckpt)
    if pset is not None:
        ppath = run_dir / "passports.ppnc"
        passports.save_passports(pset, ppath, signature=signature)
        artifacts["passports"] = str(ppath)
    if trigger is not None:
        tpath = run_dir / "trigger.ppnc"
        save_trigger_set(trigger, tpath)
        artifacts["trigger"] = str(tpath)
    record = {
        "command": "train",
        "config": run_config,
        "metrics": metrics,
        "artifacts": artifacts,
        "wall_clock_sec": round(time.time() - args._t0, 2),
        "versions": {"passportnet": __version__, "torch": torch.__version__,
                     "numpy": np.__version__},
    }
    results.write_record(run_dir, record)
    print(json.dumps({"run_dir": str(run_dir), "metrics": metrics}, indent=2))
    return EXIT_OK


def vars_public(args):
    return {k: v for k, v in vars(args).items()
            if not k.startswith("_") and k != "func" and not callable(v)}


def cmd_verify(args):
    model, meta = load_checkpoint(args.model)
    pset, signature = passports.load_passports_with_signature(args.passports, model=model)
    if signature is None:
        raise ConfigError(f"{args.passports} carries no signature; cannot verify")
    trigger = load_trigger_set(args.trigger) if args.trigger else None
    _, test_set = _load_sets(args)
    target = args.target_accuracy
    if target is None:
        target = meta.get("extra", {}).get("valid_accuracy")
    if target is None:
        raise ConfigError("no --target-accuracy given and none recorded in the checkpoint")
    config = VerifyConfig(
        fidelity=FidelityConfig(target_accuracy=target, epsilon_f=args.epsilon_f,
                                test_set_ref=args.dataset),
        trigger_threshold=args.trigger_threshold,
    )
    report = verify_ownership(model, pset, signature, test_set, config,
                              trigger_set=trigger)
    print(report.to_json())
    if args.out:
        Path(args.out).write_text(report.to_json())
    _record(args, "verify", {"command": "verify", **vars_public(args)},
            json.loads(report.to_json()))
    return EXIT_OK if report.owned else EXIT_NOT_OWNED


def _require_passports(args, model):
    if not args.passports:
        raise ConfigError(f"attack kind {args.kind!r} needs --passports")
    return passports.load_passports_with_signature(args.passports, model=model)


def cmd_attack(args):
    model, meta = load_checkpoint(args.model)
    train_set, test_set = _load_sets(args)
    epochs = meta.get("extra", {}).get("scheme_config", {}).get("epochs", 30)
    batch_size = meta.get("extra", {}).get("scheme_config", {}).get("batch_size", 64)
    base_cfg = SchemeConfig(scheme="v1", epochs=epochs, batch_size=batch_size)
    budget = attacks.budget_from_training(
        base_cfg, len(train_set), fraction=args.budget_fraction, lr=args.attack_lr,
        seed=args.seed,
    )
    kind = args.kind
    metrics = {}

    if kind == "forge-feature":
        gen = torch.Generator().manual_seed(args.seed)
        new_bits = torch.randint(0, 2, (args.wm_bits,), generator=gen).float()
        _, outcome = attacks.forge_feature_watermark(model, new_bits, budget)
        metrics = outcome.metrics
    elif kind == "forge-trigger":
        cfg = attacks.TriggerForgeConfig(n_base=args.n_base, eta=args.eta,
                                         iterations=budget.iterations * 3,
                                         seed=args.seed)
        pset = None
        if model.scheme == "v1" and model.passport_layer_ids:
            pset, _ = _require_passports(args, model)
        _, outcome = attacks.forge_trigger_set(model, test_set.images, cfg,
                                               passports=pset)
        metrics = outcome.metrics
    elif kind == "random-passport":
        target = meta.get("extra", {}).get("valid_accuracy")
        outcome = attacks.attack_random_passport(model, test_set, n=args.n_fake,
                                                 seed=args.seed, target_accuracy=target)
        metrics = outcome.metrics
    elif kind == "reverse-passport":
        _, outcome = attacks.attack_reverse_passport(model, train_set, test_set,
                                                     budget, mode=args.mode)
        metrics = outcome.metrics
    elif kind == "insider":
        pset, signature = _require_passports(args, model)
        _, outcome = attacks.attack_insider(model, pset, signature,
                                            args.flip_fraction, train_set, test_set,
                                            budget)
        metrics = outcome.metrics
    elif kind == "flip-signs":
        pset, signature = _require_passports(args, model)
        accuracy = attacks.attack_flip_signs(model, pset, signature,
                                             args.flip_fraction, test_set,
                                             seed=args.seed)
        metrics = {"accuracy": accuracy, "flip_fraction": args.flip_fraction}
    elif kind == "finetune":
        pset, signature = _require_passports(args, model)
        trigger = load_trigger_set(args.trigger) if args.trigger else None
        new_train = data.load_dataset("synthetic-b", "train", n=args.train_size,
                                      seed=args.seed)
        new_test = data.load_dataset("synthetic-b", "test", n=args.test_size,
                                     seed=args.seed)
        cfg = attacks.FinetuneConfig(epochs=args.finetune_epochs, lr=args.finetune_lr,
                                     seed=args.seed)
        res = attacks.removal_finetune(model, pset, signature, new_train, new_test,
                                       cfg, trigger_set=trigger)
        metrics = {
            "new_task_accuracy": res.new_task_accuracy,
            "signature_detection": res.signature_detection,
            "trigger_detection": res.trigger_detection,
        }
    elif kind == "prune":
        pset = signature = None
        if args.passports:
            pset, signature = _require_passports(args, model)
        if args.rates:
            rates = [float(r) for r in args.rates.split(",")]
            metrics = {"prune_sweep": attacks.prune_sweep(model, rates, pset,
                                                          signature, test_set)}
        else:
            _, metrics = attacks.removal_prune(model, args.rate, passports=pset,
                                               signature=signature, test_set=test_set)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown attack kind {kind!r}")

    run_config = {"command": "attack", **vars_public(args)}
    run_dir, _ = _record(args, "attack", run_config, metrics)
    print(json.dumps({"run_dir": str(run_dir), "kind": kind, "metrics": metrics},
                     indent=2, default=str))
    return EXIT_OK


def cmd_probe(args):
    model, meta = load_checkpoint(args.model)
    _, test_set = _load_sets(args)
    target = args.target_accuracy
    if target is None:
        target = meta.get("extra", {}).get("valid_accuracy", float("nan"))
    stats = noninvertibility_probe(model, test_set, target, n_fake=args.n_fake,
                                   seed=args.seed)
    metrics = {
        "n_fake": stats.n_fake,
        "mean_accuracy": stats.mean_accuracy,
        "max_accuracy": stats.max_accuracy,
        "target_accuracy": stats.target_accuracy,
        "accuracies": stats.accuracies,
        "gaps": stats.gaps,
    }
    _record(args, "probe", {"command": "probe", **vars_public(args)}, metrics)
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_report(args):
    records = results.load_records(args.runs_dir)
    written = results.render_report(records, args.out)
    print(json.dumps({"records": len(records), "written": [str(p) for p in written]}))
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args._t0 = time.time()
    _apply_determinism(args)
    try:
        return args.func(args)
    except PassportNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
