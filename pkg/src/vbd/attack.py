"""Backdoor injection: trigger catalog, the blending transform and dataset poisoning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabeledImageSet
from .fileio import read_image, read_netpbm

TRIGGER_KINDS = ("white_square", "green_square", "white_grid", "color_grid")

# opaque cells of the 3x3 grids (corners + centre) and their colors in raster order
_GRID_CELLS = ((0, 0), (0, 2), (1, 1), (2, 0), (2, 2))
_GRID_COLORS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0), (1.0, 1.0, 1.0))


class TriggerError(ValueError):
    pass


@dataclass
class Trigger:
    """Full-canvas pattern (H, W, C) and binary mask (H, W) broadcast over channels."""

    pattern: np.ndarray
    mask: np.ndarray
    name: str = "trigger"

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.pattern.shape[:2] != self.mask.shape:
            raise TriggerError(f"pattern {self.pattern.shape} and mask {self.mask.shape} disagree")
        if not self.mask.any():
            raise TriggerError(f"trigger {self.name!r} has an empty mask")

    @property
    def footprint(self):
        """(rows, cols) of the mask's bounding box."""
        r = np.flatnonzero(self.mask.any(axis=1))
        c = np.flatnonzero(self.mask.any(axis=0))
        return int(r[-1] - r[0] + 1), int(c[-1] - c[0] + 1)

    @property
    def offset(self):
        r = np.flatnonzero(self.mask.any(axis=1))
        c = np.flatnonzero(self.mask.any(axis=0))
        return int(r[0]), int(c[0])


def blend(x, pattern, mask, alpha):
    """x*(1-m) + (1-alpha)*(x*m) + alpha*(m*p) for one image or a batch.

    ``alpha`` is a scalar or one value per image of the batch. Off-mask
    pixels are returned bit-identical.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1) or np.any(np.isnan(a)):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x = np.asarray(x)
    pattern = np.asarray(pattern)
    mask = np.asarray(mask).astype(bool)
    if x.shape[-3:] != pattern.shape or x.shape[-3:-1] != mask.shape:
        raise ValueError(f"image {x.shape[-3:]}, pattern {pattern.shape} and mask {mask.shape} disagree")
    if a.ndim == 1:
        if x.ndim != 4 or len(a) != len(x):
            raise ValueError("per-image alpha needs a batch of matching length")
        a = a[:, None, None, None]
    elif a.ndim != 0:
        raise ValueError("alpha must be a scalar or a 1-D array")
    a = a.astype(x.dtype) if x.dtype.kind == "f" else a
    mixed = (1 - a) * x + a * pattern
    return np.where(mask[..., None], np.clip(mixed, 0.0, 1.0), x).astype(x.dtype, copy=False)


def apply_trigger(x, t: Trigger, alpha: float):
    return blend(x, t.pattern, t.mask, alpha)


def _cell_colors(kind):
    if kind == "white_square":
        return {(i, j): (1.0, 1.0, 1.0) for i in range(3) for j in range(3)}
    if kind == "green_square":
        return {(i, j): (0.0, 1.0, 0.0) for i in range(3) for j in range(3)}
    if kind == "white_grid":
        return {cell: (1.0, 1.0, 1.0) for cell in _GRID_CELLS}
    if kind == "color_grid":
        return dict(zip(_GRID_CELLS, _GRID_COLORS))
    raise TriggerError(f"unknown trigger kind {kind!r}; expected one of {TRIGGER_KINDS}")


def catalog_trigger(kind: str, offset, image_dims) -> Trigger:
    """A 3x3 catalog trigger with its top-left corner at ``offset``."""
    H, W, C = image_dims
    r0, c0 = map(int, offset)
    if r0 < 0 or c0 < 0 or r0 + 3 > H or c0 + 3 > W:
        raise TriggerError(f"3x3 trigger at {offset} does not fit a {H}x{W} image")
    cells = _cell_colors(kind)
    pattern = np.zeros((H, W, C))
    mask = np.zeros((H, W), dtype=bool)
    for (i, j), rgb in cells.items():
        mask[r0 + i, c0 + j] = True
        pattern[r0 + i, c0 + j] = rgb if C == 3 else np.full(C, np.mean(rgb))
    return Trigger(pattern, mask, kind)


def placement_for_class(k: int, trigger_dims, image_dims):
    """Top-left corner of class k's tile: tiles fill the bottom row right to left, then move up."""
    th, tw = trigger_dims
    H, W = image_dims[:2]
    per_row = W // tw
    rows = H // th
    if per_row == 0 or rows == 0 or k >= per_row * rows:
        raise TriggerError(
            f"class {k} does not fit: a {H}x{W} canvas holds {per_row * rows} tiles of {th}x{tw}"
        )
    row, col = divmod(k, per_row)
    return H - th * (row + 1), W - tw * (col + 1)


def load_trigger(pattern_file, mask_file=None, image_dims=None, offset=None, name=None) -> Trigger:
    """Trigger from a PPM/PGM pattern and an optional PGM mask (nonzero = opaque).

    Without a mask every pattern pixel is opaque. A pattern smaller than
    ``image_dims`` is placed at ``offset`` (default bottom-right).
    """
    pat = read_image(pattern_file)
    ph, pw, pc = pat.shape
    if mask_file is None:
        m = np.ones((ph, pw), dtype=bool)
    else:
        raw = read_netpbm(mask_file)
        if raw.ndim == 3:
            raw = raw.max(axis=2)
        if raw.shape != (ph, pw):
            raise TriggerError(f"mask {raw.shape} does not match pattern {(ph, pw)}")
        m = raw > 0
    if not m.any():
        raise TriggerError(f"{mask_file}: mask has no opaque pixel")
    H, W, C = image_dims if image_dims is not None else (ph, pw, pc)
    if pc != C:
        if pc == 3 and C == 1:
            pat = pat.mean(axis=2, keepdims=True)
        elif pc == 1:
            pat = np.repeat(pat, C, axis=2)
        else:
            raise TriggerError(f"pattern has {pc} channels, images have {C}")
    if offset is None:
        offset = placement_for_class(0, (ph, pw), (H, W))
    r0, c0 = map(int, offset)
    if r0 < 0 or c0 < 0 or r0 + ph > H or c0 + pw > W:
        raise TriggerError(f"{ph}x{pw} pattern at {offset} does not fit a {H}x{W} image")
    pattern = np.zeros((H, W, C))
    mask = np.zeros((H, W), dtype=bool)
    pattern[r0:r0 + ph, c0:c0 + pw] = np.where(m[..., None], pat, 0.0)
    mask[r0:r0 + ph, c0:c0 + pw] = m
    return Trigger(pattern, mask, name or str(pattern_file))


# ---------------------------------------------------------------------------
# poisoning


ALL_TO_ONE = "all_to_one"
ALL_TO_ALL = "all_to_all"
_MODE_ALIASES = {"alltoone": ALL_TO_ONE, "all_to_one": ALL_TO_ONE, "alltoall": ALL_TO_ALL, "all_to_all": ALL_TO_ALL}


@dataclass
class PoisonPlan:
    """``trigger`` is a catalog kind name, or a dict with either ``kind`` (+ optional
    ``offset``) or ``pattern_file`` (+ optional ``mask_file`` and ``offset``)."""

    mode: str = ALL_TO_ONE
    ratio: float = 0.1
    alpha: float = 1.0
    target_class: int | None = 0
    trigger: str | dict = "white_square"
    seed: int = 0

    def __post_init__(self):
        mode = _MODE_ALIASES.get(str(self.mode).replace("-", "_").lower())
        if mode is None:
            raise ValueError(f"unknown poisoning mode {self.mode!r}")
        self.mode = mode
        if not 0 < self.ratio < 1:
            raise ValueError(f"ratio must lie in (0, 1), got {self.ratio}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode == ALL_TO_ONE and self.target_class is None:
            raise ValueError("all-to-one poisoning needs a target_class")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        keys = {"mode", "ratio", "alpha", "target_class", "trigger", "seed"}
        unknown = set(d) - keys
        if unknown:
            raise ValueError(f"unknown plan fields: {sorted(unknown)}")
        return cls(**d)

    def target_for(self, source_class: int, class_count: int) -> int:
        if self.mode == ALL_TO_ONE:
            return int(self.target_class)
        return (source_class + 1) % class_count


def build_trigger(spec, image_dims, placement_index: int = 0, whole_image_ok: bool = True) -> Trigger:
    """Materialize a plan's trigger entry on a canvas; tile ``placement_index`` is used
    when no explicit offset is given."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    spec = dict(spec)
    if "pattern_file" in spec:
        pat_dims = read_netpbm(spec["pattern_file"]).shape[:2]
        if tuple(pat_dims) == tuple(image_dims[:2]) and not whole_image_ok:
            raise TriggerError("whole-image triggers cannot be placed per class")
        offset = spec.get("offset") or placement_for_class(placement_index, pat_dims, image_dims)
        return load_trigger(spec["pattern_file"], spec.get("mask_file"), image_dims, offset, spec.get("name"))
    kind = spec.get("kind", "white_square")
    offset = spec.get("offset") or placement_for_class(placement_index, (3, 3), image_dims)
    return catalog_trigger(kind, offset, image_dims)


@dataclass
class PoisonedDataset:
    data: LabeledImageSet
    ground_truth: np.ndarray
    plan: PoisonPlan
    triggers: dict = field(default_factory=dict)  # target class -> Trigger

    @property
    def poisoned_ids(self):
        return self.data.ids[self.ground_truth]

    @property
    def target_classes(self):
        return sorted(self.triggers)


def poison_count(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 1e-9))


def poison(dataset: LabeledImageSet, plan: PoisonPlan) -> PoisonedDataset:
    """Replace floor(ratio * n_k) seeded picks of each class k by triggered, relabeled copies."""
    K = dataset.class_count
    if plan.mode == ALL_TO_ONE and not 0 <= plan.target_class < K:
        raise ValueError(f"target class {plan.target_class} outside [0, {K})")
    if plan.mode == ALL_TO_ALL and K < 2:
        raise ValueError("all-to-all poisoning needs at least two classes")
    rng = np.random.default_rng(plan.seed)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    flags = np.zeros(len(dataset), dtype=bool)
    triggers = {}
    if plan.mode == ALL_TO_ONE:
        shared = build_trigger(plan.trigger, dataset.dims, 0)
        triggers[int(plan.target_class)] = shared
    for k in range(K):
        idx = np.flatnonzero(dataset.labels == k)
        n = poison_count(plan.ratio, idx.size)
        if n == 0:
            continue
        chosen = np.sort(rng.choice(idx, size=n, replace=False))
        target = plan.target_for(k, K)
        if plan.mode == ALL_TO_ONE:
            trig = shared
        else:
            trig = build_trigger(plan.trigger, dataset.dims, k, whole_image_ok=False)
            triggers[target] = trig
        images[chosen] = apply_trigger(images[chosen], trig, plan.alpha)
        labels[chosen] = target
        flags[chosen] = True
    data = LabeledImageSet(images, labels, K, dataset.ids.copy())
    return PoisonedDataset(data, flags, plan, triggers)
