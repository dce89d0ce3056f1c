import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vbd.data import LabeledImageSet
from vbd.nn import (
    BN_EPS,
    ConvBlock,
    SimpleNetSpec,
    SpecError,
    TrainConfig,
    forward,
    init_network,
    input_gradient,
    input_gradients,
    load_checkpoint,
    margin,
    mean_input_gradient,
    predict,
    save_checkpoint,
    train_sgd,
)


def _random_small_net(rng):
    blocks = tuple(ConvBlock(int(rng.integers(1, 5)), int(rng.choice([1, 3])), bool(rng.integers(2)))
                   for _ in range(int(rng.integers(1, 3))))
    dims = (int(rng.integers(6, 9)), int(rng.integers(6, 9)), int(rng.integers(1, 4)))
    spec = SimpleNetSpec(dims, blocks, int(rng.integers(2, 5)))
    net = init_network(spec, int(rng.integers(1 << 30)))
    for i, blk in enumerate(blocks):  # non-trivial inference statistics
        net.params[f"bn{i}.gamma"] = rng.uniform(0.5, 1.5, blk.filters)
        net.params[f"bn{i}.beta"] = rng.normal(0, 0.3, blk.filters)
        net.params[f"bn{i}.running_mean"] = rng.normal(0, 0.2, blk.filters)
        net.params[f"bn{i}.running_var"] = rng.uniform(0.5, 2.0, blk.filters)
    return net


def _two_population_set(rng, n=100, dims=(8, 8, 3)):
    a = np.broadcast_to(rng.random(dims[2]) * 0.4, (n, *dims))
    b = np.broadcast_to(0.6 + rng.random(dims[2]) * 0.4, (n, *dims))
    return LabeledImageSet(np.concatenate([a, b]), np.repeat([0, 1], n), 2)


# --- construction ----------------------------------------------------------


def test_init_deterministic():
    spec = SimpleNetSpec.classifier((32, 32, 3), (64,), 10)
    a, b = init_network(spec, 0), init_network(spec, 0)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = init_network(spec, 1)
    assert not np.array_equal(a.params["conv0.weight"], c.params["conv0.weight"])


def test_kernel_larger_than_input_rejected():
    with pytest.raises(SpecError, match="does not fit"):
        init_network(SimpleNetSpec.classifier((3, 3, 1), (4,), 2, kernel_size=5))


@pytest.mark.parametrize("spec", [
    SimpleNetSpec((8, 8, 3), (ConvBlock(4),) * 4, 2),
    SimpleNetSpec((8, 8, 3), (ConvBlock(4),), 1),
    SimpleNetSpec((8, 8, 3), (ConvBlock(4),), 2, head="softmax", use_batchnorm=False),
    SimpleNetSpec((8, 8, 3), (ConvBlock(4),), 1, head="sigmoid", use_batchnorm=False, dropout_rate=0.0),
    SimpleNetSpec((8, 8, 3), (ConvBlock(4, 2),), 2),
])
def test_invalid_specs(spec):
    with pytest.raises(SpecError):
        spec.validate()


def test_parameter_count_by_hand():
    net = init_network(SimpleNetSpec.classifier((32, 32, 3), (10, 10), 10), seed=1)
    conv0 = 3 * 3 * 3 * 10 + 10
    bn0 = 2 * 10
    conv1 = 3 * 3 * 10 * 10 + 10
    bn1 = 2 * 10
    fc = (8 * 8 * 10) * 10 + 10
    assert net.parameter_count() == conv0 + bn0 + conv1 + bn1 + fc == 7640


# --- forward ---------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_softmax_normalized(seed, training):
    rng = np.random.default_rng(seed)
    net = _random_small_net(rng)
    x = rng.random((5, *net.spec.input_dims))
    out = forward(net, x, training_mode=training).outputs
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=1) - 1)) <= 1e-6


def test_zero_head_gives_uniform_softmax():
    net = init_network(SimpleNetSpec.classifier((8, 8, 3), (4,), 7), 3)
    net.params["fc.weight"][:] = 0
    net.params["fc.bias"][:] = 0
    out = forward(net, np.random.default_rng(0).random((4, 8, 8, 3))).outputs
    assert np.allclose(out, 1 / 7, atol=1e-15)


def _scalar_net(w=0.7, b=0.1, gamma=1.3, beta=0.2, rm=0.05, rv=2.0, v=(1.5, -0.4), c=(0.3, 0.0)):
    spec = SimpleNetSpec((1, 1, 1), (ConvBlock(1, 1, pool=False),), 2)
    net = init_network(spec, 0)
    net.params.update({
        "conv0.weight": np.array([[[[w]]]]), "conv0.bias": np.array([b]),
        "bn0.gamma": np.array([gamma]), "bn0.beta": np.array([beta]),
        "bn0.running_mean": np.array([rm]), "bn0.running_var": np.array([rv]),
        "fc.weight": np.array([v]), "fc.bias": np.array(c),
    })
    return net


def test_scalar_path_matches_hand_evaluation():
    net = _scalar_net()
    x = 0.6
    h = 1.3 * (0.7 * x + 0.1 - 0.05) / np.sqrt(2.0 + BN_EPS) + 0.2  # positive, so ReLU passes it
    expected = [1.5 * h + 0.3, -0.4 * h]
    logits = forward(net, np.array([[[[x]]]])).logits[0]
    assert np.allclose(logits, expected, atol=1e-12, rtol=0)


def test_dimension_mismatch_rejected():
    net = init_network(SimpleNetSpec.classifier((8, 8, 3), (4,), 2))
    with pytest.raises(ValueError):
        forward(net, np.zeros((1, 8, 8, 1)))


def test_training_mode_uses_batch_statistics():
    net = _random_small_net(np.random.default_rng(5))
    x = np.random.default_rng(6).random((6, *net.spec.input_dims))
    assert not np.allclose(forward(net, x).logits, forward(net, x, training_mode=True).logits)


# --- gradients -------------------------------------------------------------


def test_linear_path_gradient_by_hand():
    net = _scalar_net()
    expected = (1.5 - -0.4) * 1.3 * 0.7 / np.sqrt(2.0 + BN_EPS)
    for x in (0.2, 0.6, 0.95):
        g = input_gradient(net, np.array([[[x]]]), 0)
        assert abs(g[0, 0, 0] - expected) <= 1e-12


def test_constant_network_has_zero_gradient():
    net = init_network(SimpleNetSpec.classifier((6, 6, 2), (3, 3), 4), 2)
    for i in range(2):
        net.params[f"conv{i}.weight"][:] = 0
    g = input_gradient(net, np.random.default_rng(0).random((6, 6, 2)), 1)
    assert np.all(g == 0)


def _rel(a, b):
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale > 1e-8, np.abs(a - b) / np.where(scale > 0, scale, 1), 0.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2024)
    h = 1e-4
    checked = 0
    for _ in range(100):
        net = _random_small_net(rng)
        x = rng.random(net.spec.input_dims)
        c = int(rng.integers(net.spec.num_classes))
        g = input_gradient(net, x, c).ravel()
        flat = x.ravel()
        shape = (flat.size, *net.spec.input_dims)
        eye = h * np.eye(flat.size)
        m0 = margin(net, x[None], c)[0]
        up = margin(net, (flat + eye).reshape(shape), c)
        down = margin(net, (flat - eye).reshape(shape), c)
        central = (up - down) / (2 * h)
        fwd, bwd = (up - m0) / h, (m0 - down) / h
        # a ReLU / max-pool / rival-class kink inside the step breaks the
        # central difference; there the gradient must equal one one-sided slope
        smooth = _rel(fwd, bwd) <= 1e-3
        assert np.all(_rel(g, central)[smooth] <= 1e-3)
        assert np.all(np.minimum(_rel(g, fwd), _rel(g, bwd))[~smooth] <= 1e-3)
        assert smooth.mean() >= 0.9
        checked += smooth.sum()
    assert checked > 5000


def test_detector_head_rejected_for_gradients():
    net = init_network(SimpleNetSpec.detector((8, 8, 3)))
    with pytest.raises(ValueError):
        input_gradient(net, np.zeros((8, 8, 3)), 0)


def test_mean_input_gradient():
    rng = np.random.default_rng(9)
    net = _random_small_net(rng)
    xs = rng.random((3, *net.spec.input_dims))
    per = [input_gradient(net, x, 1) for x in xs]
    assert np.array_equal(mean_input_gradient(net, xs[:1], 1), per[0])
    assert np.allclose(mean_input_gradient(net, xs, 1), (per[0] + per[1] + per[2]) / 3, atol=1e-15)
    with pytest.raises(ValueError):
        mean_input_gradient(net, xs[:0], 1)


def test_opposite_gradients_cancel():
    net = _scalar_net(b=0.3)
    # gradient is constant along the active linear path; swapping the head rows negates it
    g = input_gradients(net, np.array([[[[0.4]]], [[[0.8]]]]), 0)
    assert np.allclose(g[0], g[1])
    net2 = _scalar_net(b=0.3, v=(-0.4, 1.5))
    g2 = input_gradients(net2, np.array([[[[0.4]]]]), 0)
    assert np.allclose(np.mean([g[0], g2[0]], axis=0), 0, atol=1e-15)


# --- training --------------------------------------------------------------


def test_separable_toy_set_reaches_full_accuracy():
    data = _two_population_set(np.random.default_rng(0))
    net = init_network(SimpleNetSpec.classifier(data.dims, (4,), 2), 0)
    trained, hist = train_sgd(net, data, TrainConfig(batch_size=16, epochs=20))
    assert len(hist) == 20
    assert hist[-1] == 1.0
    assert np.all(np.argmax(predict(trained, data.images), axis=1) == data.labels)


def test_overfits_small_patch():
    rng = np.random.default_rng(1)
    base = rng.random((200, 16, 16, 3))
    x = base.copy()
    x[100:, 12:15, 12:15, :] = 1.0
    data = LabeledImageSet(x, np.repeat([0, 1], 100), 2)
    net = init_network(SimpleNetSpec.classifier(data.dims, (16,), 2), 0)
    _, hist = train_sgd(net, data, TrainConfig(batch_size=16, epochs=20))
    assert max(hist) >= 0.99


def test_zero_epochs_is_noop():
    data = _two_population_set(np.random.default_rng(0), n=10)
    net = init_network(SimpleNetSpec.classifier(data.dims, (4,), 2), 0)
    out, hist = train_sgd(net, data, TrainConfig(epochs=0))
    assert hist == []
    assert all(np.array_equal(out.params[k], net.params[k]) for k in net.params)


def test_training_deterministic():
    data = _two_population_set(np.random.default_rng(3), n=30)
    net = init_network(SimpleNetSpec.classifier(data.dims, (4,), 2), 0)
    cfg = TrainConfig(batch_size=8, epochs=3, momentum=0.9, seed=11)
    a, ha = train_sgd(net, data, cfg)
    b, hb = train_sgd(net, data, cfg)
    assert ha == hb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_training_errors():
    net = init_network(SimpleNetSpec.classifier((8, 8, 3), (4,), 2), 0)
    empty = LabeledImageSet(np.zeros((0, 8, 8, 3)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ValueError):
        train_sgd(net, empty, TrainConfig())
    bad = LabeledImageSet(np.zeros((2, 8, 8, 3)), [0, 2], 3)
    with pytest.raises(ValueError):
        train_sgd(net, bad, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_detector_trains_on_binary_labels():
    data = _two_population_set(np.random.default_rng(4), n=40)
    net = init_network(SimpleNetSpec.detector(data.dims, (4,)), 0)
    _, hist = train_sgd(net, data, TrainConfig(batch_size=8, epochs=10, momentum=0.9))
    assert hist[-1] >= 0.95


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    net = init_network(SimpleNetSpec.classifier((8, 8, 3), (4, 6), 5), 7)
    path = tmp_path / "m.vbdn"
    save_checkpoint(net, path)
    assert path.read_bytes()[:4] == b"VBDN"
    back = load_checkpoint(path)
    assert back.spec == net.spec and back.rng_seed == 7
    for k, v in net.params.items():
        assert np.array_equal(back.params[k], v.astype(np.float32))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.vbdn"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(path)
