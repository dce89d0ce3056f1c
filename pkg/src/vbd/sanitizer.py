"""Variance-based training-set sanitization.

Pipeline per ensemble member and class: pick the most confident items as
suspects, test whether one pixel dominates their gradients (KS test against
the least confident items), extract a candidate trigger from the gradient and
variance maps, and keep it only if pasting it onto other classes flips them.
Retained triggers train per-class gradient-image detectors which flag the
malicious items of the full set; a clean model is then retrained without them.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import blend
from .data import LabeledImageSet, derive_seed, split
from .fileio import write_ppm
from .imgstats import (
    KsResult,
    gaussian_blur,
    ks_two_sample,
    min_max_scale,
    otsu_binarize,
    variance_map,
)
from .nn import (
    SimpleNet,
    SimpleNetSpec,
    SGDTrainer,
    TrainConfig,
    forward,
    init_network,
    input_gradients,
    predict,
    predict_classes,
    train_sgd,
)

log = logging.getLogger(__name__)

DETECTOR_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# types


@dataclass
class SuspectSet:
    class_id: int
    ids: np.ndarray
    images: np.ndarray
    scores: np.ndarray  # log-probability of class_id, descending
    source_model: int = 0

    def __len__(self):
        return len(self.ids)


@dataclass
class ClassVerdict:
    class_id: int
    critical_pixel: tuple
    ks: KsResult
    ks_alpha: float = 0.01

    @property
    def poisoned(self) -> bool:
        return self.ks.p_value < self.ks_alpha


@dataclass
class CandidatePattern:
    class_id: int
    pattern: np.ndarray  # (H, W, C), zero off-mask
    mask: np.ndarray  # (H, W) bool
    asr: float | None = None
    source_model: int = 0
    source_train_acc: float | None = None

    def selection_score(self, selection_alpha: float) -> float:
        return selection_alpha * (1.0 - self.source_train_acc) + (1.0 - selection_alpha) * self.asr


@dataclass
class DetectorConfig:
    filters: tuple = (64,)
    dropout_rate: float = 0.5
    epochs: int = 20
    ssl_start: int = 5
    ssl_stop: int = 15
    learning_rate: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    split: tuple = (0.8, 0.1, 0.1)
    alpha_range: tuple = (0.1, 1.0)

    def validate(self):
        if not 0 <= self.ssl_start <= self.ssl_stop <= self.epochs:
            raise ValueError("need 0 <= ssl_start <= ssl_stop <= epochs")
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9 or min(self.split) < 0 or self.split[0] == 0:
            raise ValueError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        lo, hi = self.alpha_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"alpha_range must lie in [0, 1], got {self.alpha_range}")
        return self


@dataclass
class EnsembleConfig:
    members: tuple = ((64,), (10, 10), (16, 16))  # conv filters per block, one entry per member
    suspect_count: int = 20
    ks_alpha: float = 0.01
    asr_threshold: float = 0.5
    selection_alpha: float = 0.6
    clean_pool_size: int = 200
    holdout_fraction: float = 0.2
    vote: str = "any"  # or "majority"
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0
    jobs: int = 1

    def validate(self):
        if not self.members:
            raise ValueError("the ensemble needs at least one member")
        if not 0 < self.ks_alpha < 1:
            raise ValueError("ks_alpha must lie in (0, 1)")
        if not 0 <= self.selection_alpha <= 1:
            raise ValueError("selection_alpha must lie in [0, 1]")
        if not 0 <= self.asr_threshold <= 1:
            raise ValueError("asr_threshold must lie in [0, 1]")
        if self.suspect_count < 1 or self.clean_pool_size < 1:
            raise ValueError("suspect_count and clean_pool_size must be positive")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        if self.vote not in ("any", "majority"):
            raise ValueError(f"vote must be 'any' or 'majority', got {self.vote!r}")
        self.detector.validate()
        return self

    def member_specs(self, input_dims, class_count):
        return [SimpleNetSpec.classifier(input_dims, tuple(f), class_count) for f in self.members]

    def to_dict(self):
        return {
            "members": [list(m) for m in self.members],
            "suspect_count": self.suspect_count,
            "ks_alpha": self.ks_alpha,
            "asr_threshold": self.asr_threshold,
            "selection_alpha": self.selection_alpha,
            "clean_pool_size": self.clean_pool_size,
            "holdout_fraction": self.holdout_fraction,
            "vote": self.vote,
            "train": vars(self.train).copy(),
            "detector": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self.detector).items()},
            "seed": self.seed,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "members" in d:
            d["members"] = tuple(tuple(int(f) for f in m) for m in d["members"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "detector" in d:
            det = {k: tuple(v) if isinstance(v, list) else v for k, v in d["detector"].items()}
            d["detector"] = DetectorConfig(**det)
        return cls(**d)


@dataclass
class PatternDetector:
    net: SimpleNet
    source: SimpleNet
    class_id: int
    input_scale: float
    split_sizes: dict = field(default_factory=dict)


@dataclass
class SanitizationReport:
    classes: list  # one dict per class
    patterns: dict  # class id -> selected CandidatePattern
    flagged_ids: np.ndarray
    flag_sources: dict  # item id -> classes whose detector fired
    timings: dict
    members: list
    errors: list = field(default_factory=list)

    @property
    def poisoned_classes(self):
        return sorted(self.patterns)

    def to_dict(self):
        return {
            "classes": self.classes,
            "poisoned_classes": self.poisoned_classes,
            "flagged_ids": [int(i) for i in self.flagged_ids],
            "flag_sources": {str(k): v for k, v in sorted(self.flag_sources.items())},
            "timings": self.timings,
            "members": self.members,
            "errors": self.errors,
        }


# ---------------------------------------------------------------------------
# stage 1


def class_log_probs(net: SimpleNet, images, class_id=None, batch_size: int = 512):
    """Log-softmax of the logits; sorting on these avoids ties from saturated probabilities."""
    out = []
    for s in range(0, len(images), batch_size):
        z = forward(net, images[s:s + batch_size]).logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        out.append(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))
    lp = np.concatenate(out) if out else np.zeros((0, net.spec.num_classes))
    return lp if class_id is None else lp[:, class_id]


def _rank(scores, ids, descending=True):
    """Indices ordered by score (descending or ascending), ties by ascending id."""
    key = -scores if descending else scores
    return np.lexsort((ids, key))


def estimate_suspects(model: SimpleNet, holdout: LabeledImageSet, class_id: int, n: int,
                      log_probs=None, source_model: int = 0) -> SuspectSet:
    """Top-``n`` correctly predicted items of the class by predicted probability."""
    idx = np.flatnonzero(holdout.labels == class_id)
    if idx.size == 0:
        raise ValueError(f"class {class_id} has no items in the holdout set")
    lp = log_probs[idx] if log_probs is not None else class_log_probs(model, holdout.images[idx])
    if lp.ndim == 2:
        correct = lp.argmax(axis=1) == class_id
        lp = lp[:, class_id]
    else:
        correct = predict_classes(model, holdout.images[idx]) == class_id
    idx, lp = idx[correct], lp[correct]
    order = _rank(lp, holdout.ids[idx])[:n]
    sel = idx[order]
    return SuspectSet(class_id, holdout.ids[sel], holdout.images[sel], lp[order], source_model)


def clean_candidates(holdout: LabeledImageSet, class_id: int, n: int, log_probs) -> LabeledImageSet:
    """The ``n`` items labeled ``class_id`` with the lowest probability of that class."""
    idx = np.flatnonzero(holdout.labels == class_id)
    lp = log_probs[idx, class_id] if log_probs.ndim == 2 else log_probs[idx]
    order = _rank(lp, holdout.ids[idx], descending=False)[:n]
    return holdout.subset(idx[order])


# ---------------------------------------------------------------------------
# stage 2


def critical_pixel(mean_grad):
    """Pixel maximizing the channel-mean absolute mean gradient; ties go to the lowest row-major index."""
    score = np.abs(np.asarray(mean_grad).mean(axis=-1))
    return tuple(int(v) for v in np.unravel_index(int(np.argmax(score)), score.shape))


def pixel_importance(grads, pixel):
    i, j = pixel
    return np.abs(np.asarray(grads)[:, i, j, :]).max(axis=-1)


def detect_poisoned_class(model: SimpleNet, suspects: SuspectSet, clean: LabeledImageSet,
                          ks_alpha: float = 0.01, suspect_grads=None) -> ClassVerdict:
    if len(suspects) == 0 or len(clean) == 0:
        raise ValueError("poisoned-class test needs nonempty suspect and clean samples")
    c = suspects.class_id
    gs = suspect_grads if suspect_grads is not None else input_gradients(model, suspects.images, c)
    gc = input_gradients(model, clean.images, c)
    pix = critical_pixel(gs.mean(axis=0))
    ks = ks_two_sample(pixel_importance(gs, pix), pixel_importance(gc, pix))
    return ClassVerdict(c, pix, ks, ks_alpha)


# ---------------------------------------------------------------------------
# stage 3


def gradient_mask(mean_grad, sigma: float = 1.0):
    """Channel L2 norm, min-max scale, blur, Otsu: the gradient-support mask."""
    g = np.sqrt((np.asarray(mean_grad, dtype=np.float64) ** 2).sum(axis=-1))
    g = gaussian_blur(min_max_scale(g), sigma)
    return otsu_binarize(np.clip(g, 0.0, 1.0))[1]


def compute_candidate_pattern(model: SimpleNet, suspects: SuspectSet, suspect_grads=None) -> CandidatePattern:
    if len(suspects) == 0:
        raise ValueError("pattern extraction needs a nonempty suspect set")
    c = suspects.class_id
    gs = suspect_grads if suspect_grads is not None else input_gradients(model, suspects.images, c)
    g_m = gradient_mask(gs.mean(axis=0))
    v = variance_map(suspects.images)
    _, mask = otsu_binarize(g_m * (1.0 - v))
    mean_img = np.asarray(suspects.images, dtype=np.float64).mean(axis=0)
    pattern = np.where(mask[..., None], mean_img, 0.0)
    return CandidatePattern(c, pattern, mask, source_model=suspects.source_model)


# ---------------------------------------------------------------------------
# stage 4


def other_class_pool(holdout: LabeledImageSet, class_id: int, size: int, log_probs) -> LabeledImageSet:
    """Other-class items least likely to be predicted as ``class_id``."""
    idx = np.flatnonzero(holdout.labels != class_id)
    lp = log_probs[idx, class_id]
    order = _rank(lp, holdout.ids[idx], descending=False)[:size]
    return holdout.subset(idx[order])


def check_pattern(model: SimpleNet, candidate: CandidatePattern, items: LabeledImageSet, threshold: float = 0.5):
    """Paste the candidate at full opacity; returns (asr, keep)."""
    if len(items) == 0:
        raise ValueError("pattern check needs at least one item")
    if np.any(items.labels == candidate.class_id):
        raise ValueError("pattern check items must come from other classes")
    patched = blend(items.images, candidate.pattern.astype(items.images.dtype), candidate.mask, 1.0)
    asr = float(np.mean(predict_classes(model, patched) == candidate.class_id))
    candidate.asr = asr
    return asr, asr >= threshold


def select_model_pattern(candidates, selection_alpha: float = 0.6) -> CandidatePattern:
    """Highest selection score; the earliest candidate wins ties."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidates to select from")
    scores = [c.selection_score(selection_alpha) for c in candidates]
    return candidates[int(np.argmax(scores))]


# ---------------------------------------------------------------------------
# stages 5 and 6


def _grad_features(f_s: SimpleNet, images, class_id: int, scale: float):
    g = input_gradients(f_s, images, class_id, dtype=np.float32)
    return (g * np.float32(scale)).astype(np.float32)


def _split_three(n: int, fractions, rng):
    order = rng.permutation(n)
    a = int(np.floor(fractions[0] * n + 0.5))
    b = a + int(np.floor(fractions[1] * n + 0.5))
    return order[:a], order[a:b], order[b:]


def train_pattern_detector(dataset: LabeledImageSet, f_s: SimpleNet, candidate: CandidatePattern,
                           cfg: DetectorConfig | None = None, seed: int = 0) -> PatternDetector:
    """Binary classifier on gradient images: clean (0) vs trigger-patched (1).

    Supervised pairs come from other-class items; items of the candidate's
    class are pseudo-labeled by the detector itself after each epoch inside the
    SSL window, and those labels stay frozen afterwards.
    """
    cfg = (cfg or DetectorConfig()).validate()
    c = candidate.class_id
    rng = np.random.default_rng(seed)
    others = np.flatnonzero(dataset.labels != c)
    own = np.flatnonzero(dataset.labels == c)
    if others.size == 0:
        raise ValueError("detector training needs items from other classes")
    o_tr, o_va, o_te = _split_three(others.size, cfg.split, rng)
    c_tr, c_va, c_te = _split_three(own.size, cfg.split, rng)
    x_other = dataset.images[others[o_tr]]
    x_own = dataset.images[own[c_tr]]

    raw = input_gradients(f_s, x_other, c, dtype=np.float32)
    rms = float(np.sqrt(np.mean(raw.astype(np.float64) ** 2)))
    scale = 1.0 / rms if rms > 0 else 1.0
    g_clean = raw * np.float32(scale)
    g_own = _grad_features(f_s, x_own, c, scale) if len(x_own) else g_clean[:0]

    spec = SimpleNetSpec.detector(dataset.dims, tuple(cfg.filters), cfg.dropout_rate)
    net = init_network(spec, derive_seed(seed, 0))
    tcfg = TrainConfig(cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.momentum, derive_seed(seed, 1))
    trainer = SGDTrainer(net, tcfg)
    pattern = candidate.pattern.astype(np.float32)
    pseudo = None
    lo, hi = cfg.alpha_range
    n = len(x_other)
    half = max(1, cfg.batch_size // 2)
    for epoch in range(1, cfg.epochs + 1):
        alphas = rng.uniform(lo, hi, n)
        patched = blend(x_other, pattern, candidate.mask, alphas)
        g_bad = _grad_features(f_s, patched, c, scale)
        # a clean gradient and its patched twin always share a batch; pseudo-labeled
        # items of the candidate class are spread evenly over the batches
        order = rng.permutation(n)
        starts = range(0, n, half)
        own_order = rng.permutation(len(g_own)) if pseudo is not None else np.zeros(0, dtype=np.int64)
        for s0, extra in zip(starts, np.array_split(own_order, len(starts))):
            idx = order[s0:s0 + half]
            xb = [g_clean[idx], g_bad[idx], g_own[extra]]
            yb = [np.zeros(len(idx)), np.ones(len(idx)), pseudo[extra] if len(extra) else np.zeros(0)]
            trainer.step(np.concatenate(xb), np.concatenate(yb))
        if cfg.ssl_start <= epoch < cfg.ssl_stop and len(g_own):
            pseudo = (predict(trainer.net, g_own) >= DETECTOR_THRESHOLD).astype(np.float64)
    sizes = {
        "other": [len(o_tr), len(o_va), len(o_te)],
        "own": [len(c_tr), len(c_va), len(c_te)],
        "pseudo_positive": int(pseudo.sum()) if pseudo is not None else 0,
    }
    return PatternDetector(trainer.net, f_s, c, scale, sizes)


def detector_scores(detectors, dataset: LabeledImageSet):
    """(n_items, n_detectors) sigmoid outputs."""
    out = np.zeros((len(dataset), len(detectors)))
    for k, d in enumerate(detectors):
        feats = _grad_features(d.source, dataset.images, d.class_id, d.input_scale)
        out[:, k] = predict(d.net, feats)
    return out


def detect_malicious(detectors, dataset: LabeledImageSet):
    """Ids flagged by at least one detector."""
    if not detectors:
        return set()
    hits = detector_scores(detectors, dataset) >= DETECTOR_THRESHOLD
    return set(int(i) for i in dataset.ids[hits.any(axis=1)])


# ---------------------------------------------------------------------------
# stage 7


def train_clean_model(dataset: LabeledImageSet, flagged, spec: SimpleNetSpec, cfg: TrainConfig,
                      init_seed: int = 0) -> SimpleNet:
    flagged = set(int(i) for i in flagged)
    unknown = flagged - set(int(i) for i in dataset.ids)
    if unknown:
        raise ValueError(f"{len(unknown)} flagged ids are not in the dataset")
    kept = dataset.without_ids(flagged)
    if len(kept) == 0:
        raise ValueError("every item is flagged; nothing left to train on")
    net, _ = train_sgd(init_network(spec, init_seed), kept, cfg)
    return net


# ---------------------------------------------------------------------------
# explainability


def mask_outline(mask):
    """Pixels just outside the mask (8-neighbour dilation minus the mask)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1)
    H, W = m.shape
    grown = np.zeros_like(m)
    for di in range(3):
        for dj in range(3):
            grown |= p[di:di + H, dj:dj + W]
    ring = grown & ~m
    # a mask touching the border has no outside ring there; fall back to its own edge
    return ring if ring.any() else m


def outline_image(image, mask):
    img = np.array(image, dtype=np.float64)
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    img[mask_outline(mask)] = (1.0, 0.0, 0.0)
    return img


def write_explanations(out_dir, dataset: LabeledImageSet, report: SanitizationReport):
    """One PPM per flagged item with the responsible mask outlined in red; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    pos = {int(i): k for k, i in enumerate(dataset.ids)}
    paths = []
    for item in report.flagged_ids:
        item = int(item)
        img = dataset.images[pos[item]]
        for c in report.flag_sources.get(item, []):
            img = outline_image(img, report.patterns[c].mask)
        path = os.path.join(out_dir, f"flagged_{item}.ppm")
        write_ppm(path, img)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# orchestration


def _parallel_map(fn, args, jobs):
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
        return list(pool.map(fn, *zip(*args)))


def _train_member(spec_dict, train_set, train_cfg, init_seed):
    spec = SimpleNetSpec.from_dict(spec_dict)
    net, hist = train_sgd(init_network(spec, init_seed), train_set, train_cfg)
    acc = float(np.mean(predict_classes(net, train_set.images) == train_set.labels))
    return net, acc


def _member_stages(m, net, train_acc, holdout: LabeledImageSet, cfg: EnsembleConfig):
    """Stages 1 to 4 for one member over every class; returns (records, retained, errors)."""
    lp = class_log_probs(net, holdout.images)
    records, retained, errors = {}, {}, []
    for c in range(holdout.class_count):
        rec = {"member": m, "poisoned": False, "p_value": None, "critical_pixel": None,
               "suspects": 0, "asr": None, "kept": False}
        records[c] = rec
        try:
            sus = estimate_suspects(net, holdout, c, cfg.suspect_count, lp, source_model=m)
            rec["suspects"] = len(sus)
            if len(sus) == 0:
                continue
            gs = input_gradients(net, sus.images, c)
            clean = clean_candidates(holdout, c, cfg.suspect_count, lp)
            verdict = detect_poisoned_class(net, sus, clean, cfg.ks_alpha, gs)
            rec.update(p_value=verdict.ks.p_value, ks_statistic=verdict.ks.statistic,
                       critical_pixel=list(verdict.critical_pixel), poisoned=verdict.poisoned)
            if not verdict.poisoned:
                continue
            cand = compute_candidate_pattern(net, sus, gs)
            cand.source_train_acc = train_acc
            pool = other_class_pool(holdout, c, cfg.clean_pool_size, lp)
            asr, keep = check_pattern(net, cand, pool, cfg.asr_threshold)
            rec.update(asr=asr, kept=bool(keep), mask_size=int(cand.mask.sum()))
            if keep:
                retained[c] = cand
        except ValueError as exc:
            errors.append({"member": m, "class_id": c, "error": str(exc)})
    return records, retained, errors


def run_pipeline(dataset: LabeledImageSet, cfg: EnsembleConfig | None = None, detect: bool = True):
    """Stages 1 to 6 over ``dataset``; returns (report, detectors).

    Members train on the training split; stages 1 to 5 use the holdout and
    stage 6 scores every item of ``dataset``. With ``detect=False`` the run
    stops after pattern selection and flags nothing.
    """
    cfg = (cfg or EnsembleConfig()).validate()
    timings = {}
    t0 = time.perf_counter()
    train_set, holdout = split(dataset, 1.0 - cfg.holdout_fraction, derive_seed(cfg.seed, 1))
    specs = cfg.member_specs(dataset.dims, dataset.class_count)
    args = []
    for m, spec in enumerate(specs):
        tc = TrainConfig(cfg.train.learning_rate, cfg.train.batch_size, cfg.train.epochs,
                         cfg.train.momentum, derive_seed(cfg.seed, 3, m))
        args.append((spec.to_dict(), train_set, tc, derive_seed(cfg.seed, 2, m)))
    trained = _parallel_map(_train_member, args, cfg.jobs)
    timings["train_members"] = time.perf_counter() - t0
    members = [
        {"member": m, "spec": spec.to_dict(), "train_acc": acc, "init_seed": a[3], "train_seed": a[2].seed}
        for m, (spec, (_, acc), a) in enumerate(zip(specs, trained, args))
    ]
    for info in members:
        log.info("member %d trained, accuracy %.4f", info["member"], info["train_acc"])

    t0 = time.perf_counter()
    per_member = [_member_stages(m, net, acc, holdout, cfg) for m, (net, acc) in enumerate(trained)]
    timings["suspects_to_checks"] = time.perf_counter() - t0

    classes, selected, errors = [], {}, []
    for _, _, errs in per_member:
        errors.extend(errs)
    need = 1 if cfg.vote == "any" else len(trained) // 2 + 1
    for c in range(dataset.class_count):
        votes = [recs[c] for recs, _, _ in per_member]
        cands = [ret[c] for _, ret, _ in per_member if c in ret]
        entry = {"class_id": c, "member_votes": votes, "selected_member": None, "asr": None, "train_acc": None}
        pvals = [v["p_value"] for v in votes if v["p_value"] is not None]
        entry["p_value"] = min(pvals) if pvals else None
        entry["critical_pixel"] = None
        if len(cands) >= need:
            best = select_model_pattern(cands, cfg.selection_alpha)
            selected[c] = best
            entry.update(selected_member=best.source_model, asr=best.asr, train_acc=best.source_train_acc,
                         p_value=votes[best.source_model]["p_value"],
                         critical_pixel=votes[best.source_model]["critical_pixel"],
                         mask_pixels=[list(map(int, p)) for p in np.argwhere(best.mask)])
            log.info("class %d poisoned: member %d, asr %.3f", c, best.source_model, best.asr)
        classes.append(entry)

    t0 = time.perf_counter()
    dargs = [(holdout, trained[p.source_model][0], p, cfg.detector, derive_seed(cfg.seed, 4, c))
             for c, p in sorted(selected.items())] if detect else []
    detectors = _parallel_map(train_pattern_detector, dargs, cfg.jobs)
    timings["detectors"] = time.perf_counter() - t0
    for d, entry in zip(detectors, (classes[c] for c in sorted(selected))):
        entry["detector_split"] = d.split_sizes

    t0 = time.perf_counter()
    flag_sources = {}
    if detectors:
        hits = detector_scores(detectors, dataset) >= DETECTOR_THRESHOLD
        for row in np.flatnonzero(hits.any(axis=1)):
            flag_sources[int(dataset.ids[row])] = [detectors[k].class_id for k in np.flatnonzero(hits[row])]
    timings["flagging"] = time.perf_counter() - t0
    flagged = np.array(sorted(flag_sources), dtype=np.int64)
    report = SanitizationReport(classes, selected, flagged, flag_sources, timings, members, errors)
    return report, detectors
