"""Detection metrics, attack success rate and seeded multi-repetition experiments."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import ALL_TO_ONE, PoisonPlan, PoisonedDataset, apply_trigger, poison
from .data import LabeledImageSet, SyntheticSpec, derive_seed, generate_synthetic, load_cifar10, load_cifar10_test
from .nn import SimpleNet, SimpleNetSpec, TrainConfig, init_network, predict_classes, train_sgd
from .sanitizer import EnsembleConfig, run_pipeline, train_clean_model

log = logging.getLogger(__name__)

METRICS = ("precision", "recall", "f1", "flagged", "asr_before", "asr_after", "mask_overlap")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_flags(cls, flags, truth):
        flags = np.asarray(flags, dtype=bool)
        truth = np.asarray(truth, dtype=bool)
        if flags.shape != truth.shape:
            raise ValueError(f"flag and truth arrays differ in shape: {flags.shape} vs {truth.shape}")
        return cls(int(np.sum(flags & truth)), int(np.sum(flags & ~truth)),
                   int(np.sum(~flags & truth)), int(np.sum(~flags & ~truth)))


def _ratio(num, den):
    return num / den if den else 0.0


def f1_score(flags, ground_truth):
    """(precision, recall, f1) of boolean flags against boolean truth; 0/0 counts as 0."""
    cc = ConfusionCounts.from_flags(flags, ground_truth)
    p = _ratio(cc.tp, cc.tp + cc.fp)
    r = _ratio(cc.tp, cc.tp + cc.fn)
    return p, r, _ratio(2 * p * r, p + r)


def flags_from_ids(universe_ids, flagged_ids):
    """Boolean flags over ``universe_ids``; every flagged id must belong to the universe."""
    universe_ids = np.asarray(universe_ids, dtype=np.int64)
    flagged_ids = np.asarray(sorted(set(int(i) for i in flagged_ids)), dtype=np.int64)
    unknown = np.setdiff1d(flagged_ids, universe_ids)
    if unknown.size:
        raise ValueError(f"{unknown.size} flagged ids are outside the dataset, e.g. {int(unknown[0])}")
    return np.isin(universe_ids, flagged_ids)


def attack_success_rate(model: SimpleNet, clean_items, trigger, target: int, alpha: float = 1.0) -> float:
    """Fraction of trigger-patched items predicted as ``target``."""
    images = clean_items.images if isinstance(clean_items, LabeledImageSet) else np.asarray(clean_items)
    if len(images) == 0:
        raise ValueError("attack success rate of an empty item set")
    patched = apply_trigger(images, trigger, alpha)
    return float(np.mean(predict_classes(model, patched) == target))


def poisoned_asr(model: SimpleNet, test: LabeledImageSet, pd: PoisonedDataset) -> float:
    """ASR of the plan's trigger(s) on test items whose label differs from the attack target."""
    plan = pd.plan
    hits = total = 0
    K = test.class_count
    for k in range(K):
        target = plan.target_for(k, K)
        items = test.images[test.labels == k]
        if target == k or len(items) == 0:
            continue
        trig = pd.triggers[target]
        hits += attack_success_rate(model, items, trig, target, plan.alpha) * len(items)
        total += len(items)
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentSpec:
    """``source`` is "synthetic" or "cifar10"; ``plan`` None runs on clean data.

    Repetition i uses seed ``base_seed + i``; in All-to-One mode its target
    class is i mod class_count.
    """

    source: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    cifar_dir: str | None = None
    plan: PoisonPlan | None = field(default_factory=PoisonPlan)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    repetitions: int = 5
    base_seed: int = 0
    measure_asr: bool = False
    asr_filters: tuple = (16, 16)
    test_per_class: int = 100

    def validate(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.source not in ("synthetic", "cifar10"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.source == "cifar10" and not self.cifar_dir:
            raise ValueError("cifar10 source needs cifar_dir")
        self.synthetic.validate()
        self.ensemble.validate()
        return self


@dataclass
class RepetitionResult:
    record: dict
    report: object = None
    poisoned: PoisonedDataset | None = None
    dataset: LabeledImageSet | None = None
    truth: np.ndarray | None = None


def _load_source(spec: ExperimentSpec, seed: int):
    if spec.source == "cifar10":
        return load_cifar10(spec.cifar_dir), load_cifar10_test(spec.cifar_dir)
    syn = SyntheticSpec(**{**vars(spec.synthetic), "seed": seed})
    test = generate_synthetic(SyntheticSpec(**{**vars(syn), "per_class": spec.test_per_class}), sample=1)
    return generate_synthetic(syn), test


def run_repetition(spec: ExperimentSpec, i: int) -> RepetitionResult:
    seed = spec.base_seed + i
    t0 = time.perf_counter()
    train, test = _load_source(spec, seed)
    record = {"repetition": i, "seed": seed, "target_class": None}
    pd = None
    if spec.plan is None:
        data, truth = train, np.zeros(len(train), dtype=bool)
    else:
        plan = PoisonPlan(**{**spec.plan.to_dict(), "seed": seed})
        if plan.mode == ALL_TO_ONE:
            plan.target_class = i % train.class_count
            record["target_class"] = plan.target_class
        pd = poison(train, plan)
        data, truth = pd.data, pd.ground_truth
    ens = EnsembleConfig.from_dict({**spec.ensemble.to_dict(), "seed": seed})
    report, _ = run_pipeline(data, ens)
    flags = flags_from_ids(data.ids, report.flagged_ids)
    cc = ConfusionCounts.from_flags(flags, truth)
    p, r, f1 = f1_score(flags, truth)
    record.update(precision=p, recall=r, f1=f1, flagged=int(flags.sum()), tp=cc.tp, fp=cc.fp, fn=cc.fn, tn=cc.tn,
                  poisoned_classes=report.poisoned_classes)
    if pd is not None and pd.plan.mode == ALL_TO_ONE:
        t = pd.plan.target_class
        if t in report.patterns:
            record["mask_overlap"] = int(np.sum(report.patterns[t].mask & pd.triggers[t].mask))
        else:
            record["mask_overlap"] = 0
    if spec.measure_asr and pd is not None:
        arch = SimpleNetSpec.classifier(data.dims, tuple(spec.asr_filters), data.class_count)
        tc = TrainConfig(**{**vars(ens.train), "seed": derive_seed(seed, 5)})
        before, _ = train_sgd(init_network(arch, derive_seed(seed, 6)), data, tc)
        after = train_clean_model(data, report.flagged_ids, arch, tc, derive_seed(seed, 6))
        record["asr_before"] = poisoned_asr(before, test, pd)
        record["asr_after"] = poisoned_asr(after, test, pd)
        record["clean_acc_after"] = float(np.mean(predict_classes(after, test.images) == test.labels))
    record["seconds"] = time.perf_counter() - t0
    return RepetitionResult(record, report, pd, data, truth)


def _record_only(spec, i):
    try:
        return run_repetition(spec, i).record
    except Exception as exc:  # a failed repetition is reported, not fatal
        log.warning("repetition %d failed: %s", i, exc)
        return {"repetition": i, "seed": spec.base_seed + i, "error": f"{type(exc).__name__}: {exc}"}


def aggregate(records):
    """Mean and sample standard deviation (0 for a single value) of every metric present."""
    ok = [r for r in records if "error" not in r]
    out = {"repetitions": len(records), "succeeded": len(ok)}
    for m in METRICS:
        vals = [r[m] for r in ok if r.get(m) is not None]
        if vals:
            v = np.asarray(vals, dtype=np.float64)
            out[m] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0}
    return out


def run_experiment(spec: ExperimentSpec, jobs: int = 1):
    spec.validate()
    idx = list(range(spec.repetitions))
    if jobs > 1 and len(idx) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(idx))) as pool:
            records = list(pool.map(_record_only, [spec] * len(idx), idx))
    else:
        records = [_record_only(spec, i) for i in idx]
    return {"repetitions": records, "aggregate": aggregate(records)}


def write_csv(path, records):
    cols = ["repetition", "seed", "target_class", *METRICS, "tp", "fp", "fn", "tn", "seconds", "error"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in records:
            w.writerow(r)
