"""Command-line front end.

Every subcommand reads a JSON config (``--config``), applies ``--set key=value``
overrides with dotted keys, writes its outputs plus ``manifest.json`` into
``--out`` and exits 0 on success, 1 on operational errors and 2 on
configuration errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__
from .attack import PoisonPlan, TriggerError, build_trigger, poison
from .data import (
    DatasetFormatError,
    SyntheticSpec,
    generate_synthetic,
    load_cifar10,
    load_cifar10_test,
    load_dataset,
    save_dataset,
)
from .evaluation import (
    ExperimentSpec,
    attack_success_rate,
    f1_score,
    ConfusionCounts,
    flags_from_ids,
    run_experiment,
    write_csv,
)
from .fileio import FormatError, write_float_container, write_pgm, write_ppm
from .nn import SimpleNetSpec, TrainConfig, load_checkpoint, predict_classes, save_checkpoint
from .sanitizer import EnsembleConfig, run_pipeline, train_clean_model, write_explanations

log = logging.getLogger("vbd")

SIDECAR_NAME = "ground_truth.json"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides):
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set {key}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(value)
    return cfg


def load_config(path, overrides):
    cfg = {}
    if path:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    return apply_overrides(cfg, overrides)


def _build(kind, factory, section):
    try:
        return factory(section or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {kind} section: {exc}") from exc


def _synthetic_spec(d):
    d = dict(d)
    if "dims" in d:
        d["dims"] = tuple(d["dims"])
    return SyntheticSpec(**d).validate()


def _load_data(path, test=False):
    """A dataset container, or a CIFAR-10 binary directory."""
    if os.path.isdir(path):
        return load_cifar10_test(path) if test else load_cifar10(path)
    return load_dataset(path)


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config needs a {key!r} entry")
    return cfg[key]


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out, command, cfg, seed, jobs):
    import numba

    write_json(os.path.join(out, "manifest.json"), {
        "command": command,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seed": seed,
        "jobs": jobs,
        "versions": {"vbd": __version__, "numpy": np.__version__, "numba": numba.__version__,
                     "python": platform.python_version()},
    })


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(cfg, args):
    spec = _build("synthetic", _synthetic_spec, cfg.get("synthetic"))
    if args.seed is not None:
        spec = _synthetic_spec({**vars(spec), "seed": args.seed})
        cfg.setdefault("synthetic", {})["seed"] = args.seed
    data = generate_synthetic(spec, int(cfg.get("sample", 0)))
    path = os.path.join(args.out, cfg.get("output", "dataset.vbds"))
    save_dataset(path, data)
    print(f"wrote {len(data)} items ({data.class_count} classes, {data.class_counts().tolist()} per class) to {path}")
    return spec.seed


def cmd_poison(cfg, args):
    plan_cfg = dict(_require(cfg, "plan"))
    if args.seed is not None:
        plan_cfg["seed"] = args.seed
        cfg["plan"]["seed"] = args.seed
    plan = _build("plan", PoisonPlan.from_dict, plan_cfg)
    data = _load_data(_require(cfg, "dataset"))
    pd = poison(data, plan)
    save_dataset(os.path.join(args.out, cfg.get("output", "poisoned.vbds")), pd.data)
    for target, trig in pd.triggers.items():
        write_ppm(os.path.join(args.out, f"trigger_{target}.ppm"), trig.pattern)
        write_pgm(os.path.join(args.out, f"trigger_{target}_mask.pgm"), trig.mask)
    write_json(os.path.join(args.out, SIDECAR_NAME), {
        "plan": plan.to_dict(),
        "poisoned_ids": [int(i) for i in pd.poisoned_ids],
        "target_classes": pd.target_classes,
    })
    print(f"poisoned {int(pd.ground_truth.sum())} of {len(pd.data)} items ({plan.mode}, alpha {plan.alpha})")
    return plan.seed


def _ensemble(cfg, args):
    ens_cfg = dict(cfg.get("ensemble", {}))
    if args.seed is not None:
        ens_cfg["seed"] = args.seed
        cfg.setdefault("ensemble", {})["seed"] = args.seed
    ens_cfg["jobs"] = args.jobs
    return _build("ensemble", lambda d: EnsembleConfig.from_dict(d).validate(), ens_cfg)


def _write_patterns(out, report):
    for c, cand in report.patterns.items():
        d = os.path.join(out, f"class_{c}")
        os.makedirs(d, exist_ok=True)
        write_ppm(os.path.join(d, "pattern.ppm"), cand.pattern)
        write_pgm(os.path.join(d, "mask.pgm"), cand.mask)
        write_float_container(os.path.join(d, "pattern.vbdf"), cand.pattern)


def _run_sanitizer(cfg, args, detect):
    ens = _ensemble(cfg, args)
    data = _load_data(_require(cfg, "dataset"))
    report, _ = run_pipeline(data, ens, detect=detect)
    body = report.to_dict()
    write_json(os.path.join(args.out, "timings.json"), body.pop("timings"))
    write_json(os.path.join(args.out, "report.json"), body)
    _write_patterns(args.out, report)
    return ens, data, report


def cmd_sanitize(cfg, args):
    ens, data, report = _run_sanitizer(cfg, args, detect=True)
    write_json(os.path.join(args.out, "flagged_ids.json"), [int(i) for i in report.flagged_ids])
    if cfg.get("explain", True) and len(report.flagged_ids):
        write_explanations(os.path.join(args.out, "explain"), data, report)
    print(f"poisoned classes: {report.poisoned_classes or 'none'}; flagged {len(report.flagged_ids)} of {len(data)} items")
    return ens.seed


def cmd_extract_pattern(cfg, args):
    ens, _, report = _run_sanitizer(cfg, args, detect=False)
    print(f"retained patterns for classes: {report.poisoned_classes or 'none'}")
    return ens.seed


def _read_ids(path):
    with open(path) as fh:
        ids = json.load(fh)
    if isinstance(ids, dict):
        ids = ids.get("flagged_ids", ids.get("poisoned_ids"))
    if not isinstance(ids, list):
        raise FormatError(f"{path}: expected a JSON list of ids")
    return [int(i) for i in ids]


def cmd_train_clean(cfg, args):
    data = _load_data(_require(cfg, "dataset"))
    flagged = _read_ids(cfg["flagged"]) if cfg.get("flagged") else []
    train_cfg = dict(cfg.get("train", {}))
    if args.seed is not None:
        train_cfg["seed"] = args.seed
        cfg.setdefault("train", {})["seed"] = args.seed
    tc = _build("train", lambda d: TrainConfig(**d), train_cfg)
    filters = tuple(cfg.get("filters", (16, 16)))
    spec = _build("filters", lambda f: SimpleNetSpec.classifier(data.dims, f, data.class_count).validate(), filters)
    net = train_clean_model(data, flagged, spec, tc, int(cfg.get("init_seed", tc.seed)))
    path = os.path.join(args.out, cfg.get("output", "clean_model.vbdn"))
    save_checkpoint(net, path)
    kept = data.without_ids(flagged)
    acc = float(np.mean(predict_classes(net, kept.images) == kept.labels))
    write_json(os.path.join(args.out, "train_clean.json"), {"removed": len(flagged), "trained_on": len(kept),
                                                           "train_accuracy": acc})
    print(f"trained on {len(kept)} items (removed {len(flagged)}), training accuracy {acc:.4f}; wrote {path}")
    return tc.seed


def _experiment_spec(d):
    d = dict(d)
    if "synthetic" in d:
        d["synthetic"] = _synthetic_spec(d["synthetic"])
    if "plan" in d and d["plan"] is not None:
        d["plan"] = PoisonPlan.from_dict(d["plan"])
    if "ensemble" in d:
        d["ensemble"] = EnsembleConfig.from_dict(d["ensemble"])
    if "asr_filters" in d:
        d["asr_filters"] = tuple(d["asr_filters"])
    return ExperimentSpec(**d).validate()


def cmd_evaluate(cfg, args):
    if "experiment" in cfg:
        exp_cfg = dict(cfg["experiment"])
        if args.seed is not None:
            exp_cfg["base_seed"] = args.seed
            cfg["experiment"]["base_seed"] = args.seed
        spec = _build("experiment", _experiment_spec, exp_cfg)
        result = run_experiment(spec, args.jobs)
        write_json(os.path.join(args.out, "experiment.json"), result)
        write_csv(os.path.join(args.out, "experiment.csv"), result["repetitions"])
        agg = result["aggregate"]
        if "f1" in agg:
            print(f"f1 {agg['f1']['mean']:.4f} +- {agg['f1']['std']:.4f} over {agg['succeeded']} repetitions")
        return spec.base_seed

    data = _load_data(_require(cfg, "dataset"))
    sidecar_path = _require(cfg, "ground_truth")
    if not os.path.exists(sidecar_path):
        raise FileNotFoundError(f"ground-truth sidecar {sidecar_path} not found")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    truth = flags_from_ids(data.ids, sidecar["poisoned_ids"])
    flags = flags_from_ids(data.ids, _read_ids(_require(cfg, "flagged")))
    p, r, f1 = f1_score(flags, truth)
    cc = ConfusionCounts.from_flags(flags, truth)
    metrics = {"precision": p, "recall": r, "f1": f1, **vars(cc), "flagged": int(flags.sum()),
               "poisoned": int(truth.sum())}
    if cfg.get("test_dataset"):
        test = _load_data(cfg["test_dataset"], test=True)
        plan = PoisonPlan.from_dict(sidecar["plan"])
        for key in ("poisoned_model", "clean_model"):
            if cfg.get(key):
                metrics[f"asr_{key.split('_')[0]}"] = _checkpoint_asr(load_checkpoint(cfg[key]), test, plan)
    write_json(os.path.join(args.out, "metrics.json"), metrics)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(",".join(metrics) + "\n" + ",".join(str(v) for v in metrics.values()) + "\n")
    print(f"precision {p:.4f} recall {r:.4f} f1 {f1:.4f}")
    return None


def _checkpoint_asr(model, test, plan):
    K = test.class_count
    hits = total = 0
    for k in range(K):
        target = plan.target_for(k, K)
        items = test.images[test.labels == k]
        if target == k or len(items) == 0:
            continue
        index = 0 if plan.mode == "all_to_one" else k
        trig = build_trigger(plan.trigger, test.dims, index)
        hits += attack_success_rate(model, items, trig, target, plan.alpha) * len(items)
        total += len(items)
    return hits / total if total else 0.0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "poison": cmd_poison,
    "sanitize": cmd_sanitize,
    "evaluate": cmd_evaluate,
    "extract-pattern": cmd_extract_pattern,
    "train-clean": cmd_train_clean,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vbd", description="Backdoor poisoning, detection and sanitization.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="master seed override")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default $VBD_JOBS or 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    common.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.jobs is None:
            try:
                args.jobs = int(os.environ.get("VBD_JOBS", "1"))
            except ValueError as exc:
                raise ConfigError(f"VBD_JOBS must be an integer, got {os.environ['VBD_JOBS']!r}") from exc
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config, args.set)
        os.makedirs(args.out, exist_ok=True)
        seed = COMMANDS[args.command](cfg, args)
        write_manifest(args.out, args.command, cfg, seed, args.jobs)
    except ConfigError as exc:
        print(f"vbd {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, DatasetFormatError, TriggerError, ValueError, KeyError) as exc:
        print(f"vbd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
