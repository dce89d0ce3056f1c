"""Small convolutional classifiers trained with SGD, written directly in numpy.

Images are NHWC arrays with values in [0, 1]. Each convolution block is
``conv(k x k, same padding) -> [batchnorm] -> ReLU -> [2x2 max pool]``; the
head is a fully connected layer producing K logits (softmax) or one logit
(sigmoid). Besides training, the engine exposes the gradient of the logit
margin ``z_c - max_{y != c} z_y`` with respect to the input image, which the
sanitizer builds on.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels as K

BN_EPS = 1e-5
BN_DECAY = 0.9

CHECKPOINT_MAGIC = b"VBDN"
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    """Raised for network specs that cannot be built."""


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel_size: int = 3
    pool: bool = True


@dataclass(frozen=True)
class SimpleNetSpec:
    input_dims: tuple[int, int, int]
    blocks: tuple[ConvBlock, ...]
    num_classes: int
    head: str = "softmax"
    use_batchnorm: bool = True
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(
            self, "blocks", tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.blocks)
        )

    @classmethod
    def classifier(cls, input_dims, filters, num_classes, kernel_size=3):
        """The Stage-1 style classifier: batchnorm, no dropout, softmax head."""
        return cls(input_dims, tuple(ConvBlock(f, kernel_size) for f in filters), num_classes)

    @classmethod
    def detector(cls, input_dims, filters=(16,), dropout_rate=0.5, kernel_size=3):
        """Binary pattern detector: no batchnorm, dropout before the head, sigmoid."""
        return cls(
            input_dims,
            tuple(ConvBlock(f, kernel_size) for f in filters),
            num_classes=1,
            head="sigmoid",
            use_batchnorm=False,
            dropout_rate=dropout_rate,
        )

    def validate(self):
        H, W, C = self.input_dims
        if min(H, W, C) < 1:
            raise SpecError(f"input dims must be positive, got {self.input_dims}")
        if not 1 <= len(self.blocks) <= 3:
            raise SpecError(f"expected 1 to 3 conv blocks, got {len(self.blocks)}")
        if self.head not in ("softmax", "sigmoid"):
            raise SpecError(f"unknown head {self.head!r}")
        if self.head == "softmax":
            if self.num_classes < 2:
                raise SpecError("softmax head needs at least 2 classes")
            if not self.use_batchnorm or self.dropout_rate != 0:
                raise SpecError("classifier variant requires batchnorm and no dropout")
        else:
            if self.num_classes != 1:
                raise SpecError("sigmoid head has exactly one output")
            if self.use_batchnorm or not 0 < self.dropout_rate < 1:
                raise SpecError("detector variant requires no batchnorm and dropout in (0, 1)")
        h, w = H, W
        for i, blk in enumerate(self.blocks):
            if blk.filters < 1:
                raise SpecError(f"block {i}: filter count must be positive")
            if blk.kernel_size < 1 or blk.kernel_size % 2 == 0:
                raise SpecError(f"block {i}: kernel size must be odd and positive")
            if blk.kernel_size > min(h, w):
                raise SpecError(f"block {i}: kernel {blk.kernel_size} does not fit a {h}x{w} input")
            if blk.pool:
                if min(h, w) < 2:
                    raise SpecError(f"block {i}: cannot pool a {h}x{w} map")
                h, w = h // 2, w // 2
        return self

    def feature_dims(self):
        H, W, _ = self.input_dims
        for blk in self.blocks:
            if blk.pool:
                H, W = H // 2, W // 2
        return H, W, self.blocks[-1].filters

    def to_dict(self):
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["input_dims"]),
            tuple(ConvBlock(**b) for b in d["blocks"]),
            d["num_classes"],
            d.get("head", "softmax"),
            d.get("use_batchnorm", True),
            d.get("dropout_rate", 0.0),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 256
    epochs: int = 20
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class SimpleNet:
    """Network parameters plus the spec and seed they were drawn from.

    ``params`` keeps declaration order: per block conv weight/bias, then the
    batchnorm gamma/beta/running_mean/running_var, then the head.
    """

    spec: SimpleNetSpec
    params: dict[str, np.ndarray]
    rng_seed: int = 0
    trainable: tuple[str, ...] = field(default=())

    def parameter_count(self):
        return int(sum(self.params[k].size for k in self.trainable))

    def copy(self, dtype=None):
        return SimpleNet(
            self.spec,
            {k: v.astype(dtype or v.dtype, copy=True) for k, v in self.params.items()},
            self.rng_seed,
            self.trainable,
        )


def init_network(spec: SimpleNetSpec, seed: int = 0) -> SimpleNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases from a seeded generator."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    trainable = []
    cin = spec.input_dims[2]
    for i, blk in enumerate(spec.blocks):
        k = blk.kernel_size
        bound = 1.0 / np.sqrt(k * k * cin)
        params[f"conv{i}.weight"] = rng.uniform(-bound, bound, (k, k, cin, blk.filters))
        params[f"conv{i}.bias"] = rng.uniform(-bound, bound, blk.filters)
        trainable += [f"conv{i}.weight", f"conv{i}.bias"]
        if spec.use_batchnorm:
            params[f"bn{i}.gamma"] = np.ones(blk.filters)
            params[f"bn{i}.beta"] = np.zeros(blk.filters)
            params[f"bn{i}.running_mean"] = np.zeros(blk.filters)
            params[f"bn{i}.running_var"] = np.ones(blk.filters)
            trainable += [f"bn{i}.gamma", f"bn{i}.beta"]
        cin = blk.filters
    fan_in = int(np.prod(spec.feature_dims()))
    bound = 1.0 / np.sqrt(fan_in)
    params["fc.weight"] = rng.uniform(-bound, bound, (fan_in, spec.num_classes))
    params["fc.bias"] = rng.uniform(-bound, bound, spec.num_classes)
    trainable += ["fc.weight", "fc.bias"]
    return SimpleNet(spec, params, int(seed), tuple(trainable))


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(net, batch, dtype=None):
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != net.spec.input_dims:
        raise ValueError(f"expected images of shape {net.spec.input_dims}, got {x.shape[1:]}")
    if dtype is None:
        dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    return np.ascontiguousarray(x, dtype=dtype)


def _run(net, x, training=False, rng=None, keep=False):
    """Forward pass returning logits, a backward cache and batchnorm batch stats."""
    spec, P = net.spec, net.params
    dt = x.dtype
    cache = []
    stats = []
    h = x
    for i, blk in enumerate(spec.blocks):
        B, H, W, C = h.shape
        k, F = blk.kernel_size, blk.filters
        Wc = P[f"conv{i}.weight"].astype(dt, copy=False).reshape(k * k * C, F)
        cols = K.im2col_same(h, k)
        # the conv bias is folded into the affine applied before pooling;
        # z holds the bias-free convolution
        z = (cols @ Wc).reshape(B, H, W, F)
        bias = P[f"conv{i}.bias"].astype(np.float64)
        mean = inv = None
        if spec.use_batchnorm:
            gamma = P[f"bn{i}.gamma"].astype(np.float64)
            if training:
                mean, var = K.channel_moments(z.reshape(-1, F))
                stats.append((mean + bias, var))
            else:
                mean = P[f"bn{i}.running_mean"] - bias
                var = P[f"bn{i}.running_var"]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            scale = (gamma * inv).astype(dt)
            shift = (P[f"bn{i}.beta"] - mean * gamma * inv).astype(dt)
        else:
            scale = np.ones(F, dt)
            shift = bias.astype(dt)
        if blk.pool:
            p, arg = K.affine_maxpool(z, scale, shift)
        else:
            p, arg = z * scale + shift, None
        a = np.maximum(p, 0)
        if keep:
            cache.append(dict(cols=cols, z=z, arg=arg, p=p, mean=mean, inv=inv, scale=scale, shape=(B, H, W, C)))
        h = a
    flat = h.reshape(h.shape[0], -1)
    drop = None
    if training and spec.dropout_rate > 0:
        keep_p = 1.0 - spec.dropout_rate
        drop = ((rng.random(flat.shape) < keep_p) / keep_p).astype(dt)
        flat = flat * drop
    logits = flat @ P["fc.weight"].astype(dt, copy=False) + P["fc.bias"].astype(dt, copy=False)
    if keep:
        cache.append(dict(flat=flat, drop=drop, feat_shape=h.shape))
    return logits, cache, stats


def _backward(net, cache, dlogits, training, need_input=False, need_params=True):
    """Backpropagate ``dlogits``. Parameter gradients assume training mode."""
    spec, P = net.spec, net.params
    dt = dlogits.dtype
    head = cache[-1]
    grads = {}
    if need_params:
        grads["fc.weight"] = head["flat"].T @ dlogits
        grads["fc.bias"] = dlogits.sum(0)
    dflat = dlogits @ P["fc.weight"].astype(dt, copy=False).T
    if head["drop"] is not None:
        dflat *= head["drop"]
    da = dflat.reshape(head["feat_shape"])
    for i in range(len(spec.blocks) - 1, -1, -1):
        blk, c = spec.blocks[i], cache[i]
        B, H, W, C = c["shape"]
        F, k = blk.filters, blk.kernel_size
        dp = da * (c["p"] > 0)
        z = c["z"]
        if spec.use_batchnorm and training:
            gamma = P[f"bn{i}.gamma"]
            if blk.pool:
                dz, dgamma, dbeta = K.bn_maxpool_backward(z, c["arg"], dp, c["mean"], c["inv"], gamma.astype(np.float64))
            else:
                xh = (z - c["mean"]) * c["inv"]
                n = B * H * W
                dbeta = dp.reshape(-1, F).sum(0)
                dgamma = (dp * xh).reshape(-1, F).sum(0)
                dz = (gamma * c["inv"] / n) * (n * dp - dbeta - xh * dgamma)
            dz = dz.astype(dt, copy=False)
            if need_params:
                grads[f"bn{i}.gamma"] = dgamma
                grads[f"bn{i}.beta"] = dbeta
        else:
            if blk.pool:
                dz = K.maxpool_scatter(dp, c["arg"], H, W, c["scale"])
            else:
                dz = dp * c["scale"]
        dz2 = dz.reshape(-1, F)
        if need_params:
            grads[f"conv{i}.weight"] = (c["cols"].T @ dz2).reshape(k, k, C, F)
            if spec.use_batchnorm and training:
                # the batch mean cancels the bias exactly
                grads[f"conv{i}.bias"] = np.zeros(F)
            else:
                grads[f"conv{i}.bias"] = dz2.sum(0)
        if i > 0 or need_input:
            dcols = dz2 @ P[f"conv{i}.weight"].astype(dt, copy=False).reshape(k * k * C, F).T
            da = K.col2im_same(np.ascontiguousarray(dcols), B, H, W, C, k)
    return (da if need_input else None), grads


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass
class ForwardResult:
    logits: np.ndarray
    outputs: np.ndarray  # softmax probabilities (B, K) or sigmoid scores (B,)


def forward(net: SimpleNet, batch, training_mode: bool = False, rng=None, dtype=None) -> ForwardResult:
    """Logits and head outputs for a batch of images (or a single image).

    ``training_mode`` uses batch statistics for batchnorm and samples dropout
    masks from ``rng``; the network itself is never modified.
    """
    x = _as_batch(net, batch, dtype)
    if training_mode and net.spec.dropout_rate > 0 and rng is None:
        rng = np.random.default_rng(net.rng_seed)
    logits, _, _ = _run(net, x, training=training_mode, rng=rng)
    if net.spec.head == "softmax":
        return ForwardResult(logits, _softmax(logits))
    return ForwardResult(logits, _sigmoid(logits[:, 0]))


def predict(net: SimpleNet, images, batch_size: int = 512, dtype=np.float32):
    """Eval-mode head outputs for an arbitrarily large image array."""
    images = np.asarray(images)
    outs = []
    for s in range(0, len(images), batch_size):
        outs.append(forward(net, images[s:s + batch_size], dtype=dtype).outputs)
    if not outs:
        shape = (0, net.spec.num_classes) if net.spec.head == "softmax" else (0,)
        return np.zeros(shape)
    return np.concatenate(outs)


def predict_classes(net: SimpleNet, images, batch_size: int = 512):
    out = predict(net, images, batch_size)
    if net.spec.head == "softmax":
        return out.argmax(axis=1)
    return (out >= 0.5).astype(np.int64)


# --------------------------------------------------------------------------
# training


class SGDTrainer:
    """Mutable SGD-with-momentum state over a private float32 copy of a network."""

    def __init__(self, net: SimpleNet, cfg: TrainConfig, rng=None):
        self.net = net.copy(np.float32)
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.velocity = {k: np.zeros_like(self.net.params[k]) for k in self.net.trainable}

    def step(self, x, y):
        """One SGD update on a batch; returns the number of correct training-mode predictions."""
        net = self.net
        x = np.ascontiguousarray(x, dtype=np.float32)
        logits, cache, stats = _run(net, x, training=True, rng=self.rng, keep=True)
        n = len(x)
        if net.spec.head == "softmax":
            y = np.asarray(y, dtype=np.int64)
            d = _softmax(logits.astype(np.float64))
            correct = int((d.argmax(1) == y).sum())
            d[np.arange(n), y] -= 1.0
        else:
            y = np.asarray(y, dtype=np.float64)
            s = _sigmoid(logits[:, 0].astype(np.float64))
            correct = int(((s >= 0.5) == (y >= 0.5)).sum())
            d = (s - y)[:, None]
        d = (d / n).astype(np.float32)
        _, grads = _backward(net, cache, d, training=True)
        lr, mom = self.cfg.learning_rate, self.cfg.momentum
        for name in net.trainable:
            v = self.velocity[name]
            v *= mom
            v += grads[name].astype(np.float32, copy=False)
            net.params[name] -= lr * v
        for i, (mean, var) in enumerate(stats):
            rm, rv = net.params[f"bn{i}.running_mean"], net.params[f"bn{i}.running_var"]
            rm *= BN_DECAY
            rm += (1 - BN_DECAY) * mean
            rv *= BN_DECAY
            rv += (1 - BN_DECAY) * var
        return correct

    def epoch(self, images, labels):
        """One pass over shuffled data; returns the running training accuracy."""
        n = len(images)
        order = self.rng.permutation(n)
        correct = 0
        bs = self.cfg.batch_size
        for s in range(0, n, bs):
            idx = np.sort(order[s:s + bs])
            correct += self.step(images[idx], labels[idx])
        return correct / n


def train_sgd(net: SimpleNet, data, cfg: TrainConfig):
    """Train on ``data`` (anything with ``images`` and ``labels``) and return (net, accuracy history).

    Loss is cross-entropy for the softmax head and binary cross-entropy for
    the sigmoid head. Shuffling and dropout are driven by ``cfg.seed``.
    """
    images = np.asarray(data.images)
    labels = np.asarray(data.labels)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if net.spec.head == "softmax":
        if labels.min() < 0 or labels.max() >= net.spec.num_classes:
            raise ValueError(f"labels must lie in [0, {net.spec.num_classes})")
    elif not np.isin(labels, (0, 1)).all():
        raise ValueError("sigmoid head expects 0/1 labels")
    if cfg.epochs == 0:
        return net.copy(), []
    trainer = SGDTrainer(net, cfg)
    history = [trainer.epoch(images, labels) for _ in range(cfg.epochs)]
    return trainer.net, history


# --------------------------------------------------------------------------
# input gradients


def _check_margin_net(net):
    if net.spec.head != "softmax":
        raise ValueError("input gradients need a softmax-head network (logits per class)")


def input_gradients(net: SimpleNet, images, classes, dtype=np.float64, batch_size: int = 256):
    """Batched gradient of ``z_c - max_{y != c} z_y`` with respect to each input image.

    Evaluated in eval mode (running batchnorm statistics). ``classes`` is an
    int or one class per image.
    """
    _check_margin_net(net)
    x_all = _as_batch(net, images, dtype)
    n = len(x_all)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (n,))
    Kc = net.spec.num_classes
    if n and (classes.min() < 0 or classes.max() >= Kc):
        raise ValueError(f"class index out of range [0, {Kc})")
    out = np.empty_like(x_all)
    for s in range(0, n, batch_size):
        x = x_all[s:s + batch_size]
        c = classes[s:s + batch_size]
        logits, cache, _ = _run(net, x, training=False, keep=True)
        rows = np.arange(len(x))
        others = logits.copy()
        others[rows, c] = -np.inf
        rival = others.argmax(axis=1)
        d = np.zeros_like(logits)
        d[rows, c] = 1.0
        d[rows, rival] -= 1.0
        dx, _ = _backward(net, cache, d, training=False, need_input=True, need_params=False)
        out[s:s + batch_size] = dx
    return out


def input_gradient(net: SimpleNet, x, c: int, dtype=np.float64):
    """Gradient image of the logit margin for a single image and class."""
    return input_gradients(net, np.asarray(x)[None], int(c), dtype=dtype)[0]


def mean_input_gradient(net: SimpleNet, images, c: int, dtype=np.float64):
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("mean gradient of an empty set")
    return input_gradients(net, images, c, dtype=dtype).mean(axis=0)


def margin(net: SimpleNet, images, c, dtype=np.float64):
    """The margin loss itself; used by the finite-difference checks."""
    _check_margin_net(net)
    logits = forward(net, images, dtype=dtype).logits
    n = len(logits)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    rows = np.arange(n)
    own = logits[rows, c].copy()
    logits[rows, c] = -np.inf
    return own - logits.max(axis=1)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: SimpleNet, path):
    header = json.dumps({"spec": net.spec.to_dict(), "rng_seed": net.rng_seed,
                         "params": [[k, list(v.shape)] for k, v in net.params.items()],
                         "trainable": list(net.trainable)}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for v in net.params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> SimpleNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    header = json.loads(raw[off:off + hlen])
    off += hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        if off + 4 * n > len(raw):
            raise ValueError(f"{path}: truncated at byte {off}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    spec = SimpleNetSpec.from_dict(header["spec"])
    return SimpleNet(spec, params, header["rng_seed"], tuple(header["trainable"]))
