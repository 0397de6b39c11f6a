"""Subcommand CLI: train, attack, sweep, gradcheck, lmo-selftest, render.

Exit codes: 0 success, 1 usage error, 2 config/schema validation failure,
3 runtime failure.
"""

import argparse
import json
import os
import sys

import jsonschema
import numpy as np

from . import dataio, harness, net, selftest
from .distortion import GroupPartition

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_DATASET_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "oneOf": [{"required": ["kind", "images", "labels"]},
              {"required": ["kind", "synth"]}],
    "properties": {
        "kind": {"enum": ["idx", "synth"]},
        "images": {"type": "string"},
        "labels": {"type": "string"},
        "num_classes": {"type": "integer", "minimum": 2},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "n", "seed"],
            "properties": {
                "kind": {"enum": ["blobs", "bars"]},
                "n": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "shape": {"type": "array", "items": {"type": "integer", "minimum": 1},
                          "minItems": 3, "maxItems": 3},
                "num_classes": {"type": "integer", "minimum": 2},
                "noise": {"type": "number", "minimum": 0},
            },
        },
    },
}

_ATTACK_ENTRY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method", "radius"],
    "properties": {
        "method": {"enum": list(harness.METHODS)},
        "radius": {"type": "number", "minimum": 0},
        "iterations": {"type": "integer", "minimum": 1},
        "step_rule": {"enum": ["short", "decaying", "backtracking"]},
        "lipschitz": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "partition": {"oneOf": [
            {"type": "object", "additionalProperties": False,
             "required": ["grid"], "properties": {"grid": {"type": "integer", "minimum": 1}}},
            {"type": "array", "items": {"type": "array",
                                        "items": {"type": "integer", "minimum": 0},
                                        "minItems": 6, "maxItems": 6}},
        ]},
        "weight_source": {"enum": ["none", "explicit", "variance"]},
        "weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "select_by_full_nuclear": {"type": "boolean"},
        "seed": {"type": "integer"},
        "random_start": {"type": "boolean"},
        "channel_subsample": {"type": "boolean"},
        "stop_on_success": {"type": "boolean"},
        "nonzero_threshold": {"type": "number", "exclusiveMinimum": 0},
        "name": {"type": "string"},
        "max_samples": {"type": "integer", "minimum": 1},
    },
}

ATTACK_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "dataset", "output_dir", "attacks"],
    "properties": {
        "model": {"type": "string"},
        "dataset": _DATASET_SCHEMA,
        "output_dir": {"type": "string"},
        "seed": {"type": "integer"},
        "workers": {"type": "integer", "minimum": 1},
        "save_tensors": {"type": "boolean"},
        "render_count": {"type": "integer", "minimum": 0},
        "attacks": {"type": "array", "minItems": 1, "items": _ATTACK_ENTRY_SCHEMA},
    },
}

SWEEP_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "dataset", "output_dir", "method", "radii"],
    "properties": {
        "model": {"type": "string"},
        "dataset": _DATASET_SCHEMA,
        "output_dir": {"type": "string"},
        "seed": {"type": "integer"},
        "workers": {"type": "integer", "minimum": 1},
        "method": {"enum": list(harness.METHODS)},
        "radii": {"type": "array", "minItems": 1,
                  "items": {"type": "number", "minimum": 0}},
        "attack": _ATTACK_ENTRY_SCHEMA,
    },
}


def _load_config(path, schema):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    jsonschema.validate(doc, schema)
    return doc


def _load_dataset(obj):
    if obj["kind"] == "idx":
        return dataio.parse_idx(obj["images"], obj["labels"],
                                num_classes=obj.get("num_classes", 10))
    synth = obj["synth"]
    return dataio.synth_dataset(synth["kind"], synth["n"], synth["seed"],
                                shape=tuple(synth.get("shape", (1, 28, 28))),
                                num_classes=synth.get("num_classes", 10),
                                noise=synth.get("noise", 0.1))


def _build_attack_config(entry, global_seed, shape):
    kwargs = dict(entry)
    if "partition" in kwargs:
        kwargs["partition"] = GroupPartition.from_config(kwargs["partition"], shape)
    if "weights" in kwargs:
        kwargs["weights"] = tuple(kwargs["weights"])
    kwargs.setdefault("seed", global_seed)
    return harness.AttackConfig(**kwargs)


def _cmd_train(args):
    if args.dataset.startswith("synth:"):
        kind = args.dataset.split(":", 1)[1]
        dataset = dataio.synth_dataset(kind, args.n_samples, args.seed)
    else:
        images, labels = args.dataset.split(",")
        dataset = dataio.parse_idx(images, labels)
    spec = net.PRESETS[args.preset](dataset.images.shape[1:], dataset.num_classes)
    if args.lr == 0:
        print("warning: learning rate 0; parameters will be unchanged", file=sys.stderr)
    if args.adv_epsilon is not None:
        params, history = net.adversarial_train(
            spec, dataset.images, dataset.labels, args.epochs, args.lr,
            epsilon=args.adv_epsilon, alpha=args.adv_alpha, iters=args.adv_iters,
            batch=args.batch, seed=args.seed, log_path=args.log)
    else:
        params, history = net.train_sgd(spec, dataset.images, dataset.labels,
                                        args.epochs, args.lr, batch=args.batch,
                                        seed=args.seed, log_path=args.log)
    net.save_params(args.out, spec, params, seed=args.seed)
    if history:
        last = history[-1]
        print(f"epoch {last['epoch']}: loss {last['loss']:.4f} "
              f"train_accuracy {last['train_accuracy']:.4f}")
    print(f"saved model to {args.out}")
    return EXIT_OK


def _run_attacks(doc, configs, dataset, spec, params):
    workers = doc.get("workers", 1)
    out_dir = doc["output_dir"]
    save_tensors = doc.get("save_tensors", True)
    reports, series = harness.run_campaign(spec, params, dataset.images,
                                           dataset.labels, configs, workers=workers,
                                           keep_adversarial=save_tensors)
    dataio.write_report(reports, out_dir, series=series)

    if save_tensors:
        for config, report in zip(configs, reports):
            sub = os.path.join(out_dir, config.label().replace("/", "_"))
            os.makedirs(sub, exist_ok=True)
            n = len(report.samples)
            originals = np.asarray(dataset.images[:n], dtype=np.float64)
            adversarials = np.stack([s.adversarial for s in report.samples])
            dataio.write_tensor_stack(os.path.join(sub, "originals.tns"), originals)
            dataio.write_tensor_stack(os.path.join(sub, "adversarials.tns"), adversarials)
            for i in range(min(doc.get("render_count", 8), n)):
                dataio.write_images(originals[i], adversarials[i],
                                    adversarials[i] - originals[i], sub, i)
    for report in reports:
        print(f"{report.config['name']}: clean {report.clean_accuracy:.2f}% "
              f"adversarial {report.adversarial_accuracy:.2f}% "
              f"mean_l2 {report.mean_l2:.4f}")
    return EXIT_OK


def _cmd_attack(args):
    doc = _load_config(args.config, ATTACK_CONFIG_SCHEMA)
    spec, params = net.load_params(doc["model"])
    dataset = _load_dataset(doc["dataset"])
    shape = dataset.images.shape[1:]
    configs = [_build_attack_config(entry, doc.get("seed", 0), shape)
               for entry in doc["attacks"]]
    return _run_attacks(doc, configs, dataset, spec, params)


def _cmd_sweep(args):
    doc = _load_config(args.config, SWEEP_CONFIG_SCHEMA)
    spec, params = net.load_params(doc["model"])
    dataset = _load_dataset(doc["dataset"])
    shape = dataset.images.shape[1:]
    base = dict(doc.get("attack", {}))
    base.pop("method", None)
    base.pop("radius", None)
    configs = []
    for radius in doc["radii"]:
        entry = dict(base, method=doc["method"], radius=radius,
                     name=f"{doc['method']}(r={radius:g})")
        configs.append(_build_attack_config(entry, doc.get("seed", 0), shape))
    doc.setdefault("save_tensors", False)
    return _run_attacks(doc, configs, dataset, spec, params)


def _cmd_gradcheck(args):
    worst = selftest.gradient_check(seed=args.seed)
    print(f"max finite-difference relative error: {worst:.3e}")
    if worst > 1e-4:
        print("gradcheck FAILED (tolerance 1e-4)", file=sys.stderr)
        return EXIT_VALIDATION
    print("gradcheck passed")
    return EXIT_OK


def _cmd_lmo_selftest(args):
    result = selftest.lmo_selftest(seed=args.seed,
                                   n_directions=args.directions,
                                   n_samples=args.samples)
    print(f"max optimality violation: {result.max_violation:.3e}")
    print(f"max nuclear value relative error: {result.max_nuclear_value_error:.3e}")
    print(f"max feasibility excess: {result.max_feasibility_excess:.3e}")
    ok = (result.max_violation <= 1e-7
          and result.max_nuclear_value_error <= 1e-6
          and result.max_feasibility_excess <= 1e-7)
    if not ok:
        print("lmo-selftest FAILED", file=sys.stderr)
        return EXIT_VALIDATION
    print("lmo-selftest passed")
    return EXIT_OK


def _cmd_render(args):
    rendered = 0
    for root, _dirs, files in os.walk(args.dir):
        if "originals.tns" in files and "adversarials.tns" in files:
            originals = dataio.read_tensor_stack(os.path.join(root, "originals.tns"))
            adversarials = dataio.read_tensor_stack(os.path.join(root, "adversarials.tns"))
            for i in range(len(originals)):
                dataio.write_images(originals[i], adversarials[i],
                                    adversarials[i] - originals[i], root, i)
                rendered += 1
    if rendered == 0:
        raise ValueError(f"no saved tensor stacks under {args.dir}")
    print(f"rendered {rendered} samples")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="structadv",
                     description="structured white-box adversarial attack toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a desk-scale classifier")
    p.add_argument("--preset", choices=sorted(net.PRESETS), default="cnn")
    p.add_argument("--dataset", default="synth:bars",
                   help="'synth:bars', 'synth:blobs', or 'images.idx,labels.idx'")
    p.add_argument("--n-samples", type=int, default=2000, help="synthetic dataset size")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.json")
    p.add_argument("--log", default=None, help="append per-epoch metrics (JSON lines)")
    p.add_argument("--adv-epsilon", type=float, default=None,
                   help="enable adversarial training with this PGD epsilon")
    p.add_argument("--adv-alpha", type=float, default=2.55 / 255.0)
    p.add_argument("--adv-iters", type=int, default=7)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("attack", help="run one attack campaign from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("sweep", help="accuracy-vs-radius sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("lmo-selftest", help="LMO optimality battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--directions", type=int, default=50)
    p.add_argument("--samples", type=int, default=2000)
    p.set_defaults(func=_cmd_lmo_selftest)

    p = sub.add_parser("render", help="regenerate PNM images from saved attack output")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=_cmd_render)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (jsonschema.ValidationError, ValueError) as exc:
        message = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"validation error: {message}", file=sys.stderr)
        return EXIT_VALIDATION
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
