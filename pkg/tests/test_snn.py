import numpy as np
import pytest

from lanesnn.dataset import DataError
from lanesnn.encoding import SpikeTrainBatch, encode_batch
from lanesnn.numerics import Rng
from lanesnn.snn import (
    ARCH_NAMES,
    LayerSpec,
    LifParams,
    Network,
    NetworkSpec,
    build_network,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    conv_output_size,
    count_connections,
    forward,
    hard_spike,
    layer_output_shapes,
    lif_step,
    load_checkpoint,
    network_from_specs,
    networks_equal,
    normalize_arch_name,
    save_checkpoint,
    smooth_spike,
)

LIF = LifParams(v_th=0.2, v_reset=0.0, tau=0.2)


# Membrane dynamics

def test_single_neuron_trajectory():
    u = np.zeros(1)
    o = np.zeros(1)
    u, o = lif_step(u, o, np.array([0.3]), LIF)
    assert u[0] == 0.3 and o[0] == 1.0
    # the spike gates the carried-over membrane to zero
    u, o = lif_step(u, o, np.array([0.15]), LIF)
    assert u[0] == pytest.approx(0.15) and o[0] == 0.0
    # without a spike the membrane leaks by the decay factor
    u, o = lif_step(u, o, np.array([0.0]), LIF)
    assert u[0] == pytest.approx(0.15 * 0.2) and o[0] == 0.0


def test_threshold_crossing_is_strict():
    assert hard_spike(np.array([0.2]), 0.2)[0] == 0.0
    assert hard_spike(np.array([np.nextafter(0.2, 1.0)]), 0.2)[0] == 1.0


def test_unit_decay_without_spikes_integrates():
    params = LifParams(v_th=1e9, tau=1.0)
    drives = Rng(2).uniform(size=(12, 3))
    u = np.zeros(3)
    o = np.zeros(3)
    for t in range(12):
        u, o = lif_step(u, o, drives[t], params)
        assert np.allclose(u, drives[: t + 1].sum(axis=0))
        assert o.sum() == 0.0


def test_smooth_spike_ramp():
    a1 = 0.4
    assert smooth_spike(np.array([0.2]), 0.2, a1)[0] == pytest.approx(0.5)
    assert smooth_spike(np.array([0.0]), 0.2, a1)[0] == 0.0
    assert smooth_spike(np.array([0.4]), 0.2, a1)[0] == 1.0
    assert smooth_spike(np.array([0.3]), 0.2, a1)[0] == pytest.approx(0.75)


def test_lif_params_validation():
    with pytest.raises(ValueError, match="v_th"):
        LifParams(v_th=0.0)
    with pytest.raises(ValueError, match="v_reset"):
        LifParams(v_reset=0.1)
    with pytest.raises(ValueError, match="tau"):
        LifParams(tau=0.0)
    with pytest.raises(ValueError, match="tau"):
        LifParams(tau=1.5)
    LifParams(tau=1.0)


# Convolution

def conv_oracle(x, W, b, padding, stride):
    """Direct six-loop cross-correlation."""
    bn, cin, h, w = x.shape
    cout, _, k, _ = W.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((bn, cout, ho, wo))
    for n in range(bn):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[n, ci, i * stride + ki, j * stride + kj] * W[co, ci, ki, kj]
                    out[n, co, i, j] = acc + b[co]
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_loop_oracle(stride):
    rng = Rng(7)
    x = rng.gaussian(size=(2, 2, 6, 7))
    W = rng.gaussian(size=(3, 2, 3, 3))
    b = rng.gaussian(size=3)
    got = conv2d(x, W, b, padding=1, stride=stride)
    want = conv_oracle(x, W, b, padding=1, stride=stride)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv_output_size():
    assert conv_output_size(20, 3, 1, 1) == 20
    assert conv_output_size(20, 3, 1, 2) == 10
    assert conv_output_size(80, 3, 1, 2) == 40
    with pytest.raises(ValueError):
        conv_output_size(1, 5, 0, 1)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_input_grad_is_the_adjoint(stride):
    # <conv(x), y> == <x, conv_input_grad(y)> for a linear map
    rng = Rng(11)
    x = rng.gaussian(size=(2, 2, 8, 6))
    W = rng.gaussian(size=(4, 2, 3, 3))
    y = conv2d(x, W, np.zeros(4), padding=1, stride=stride)
    dy = rng.gaussian(size=y.shape)
    dx = conv2d_input_grad(dy, W, x.shape, padding=1, stride=stride)
    assert np.vdot(y, dy) == pytest.approx(np.vdot(x, dx), rel=1e-12)


def test_conv_weight_grad_is_the_adjoint_in_w():
    # conv is linear in W too: <conv(x; W), dy> == <W, dW(x, dy)>
    rng = Rng(13)
    x = rng.gaussian(size=(3, 2, 6, 6))
    W = rng.gaussian(size=(4, 2, 3, 3))
    dy_shape = conv2d(x, W, np.zeros(4), padding=1, stride=2).shape
    dy = rng.gaussian(size=dy_shape)
    dW, db = conv2d_weight_grad(x, dy, kernel=3, padding=1, stride=2)
    y = conv2d(x, W, np.zeros(4), padding=1, stride=2)
    assert np.vdot(y, dy) == pytest.approx(np.vdot(W, dW), rel=1e-12)
    assert np.allclose(db, dy.sum(axis=(0, 2, 3)))


def test_channel_mismatch_is_rejected():
    with pytest.raises(ValueError, match="channels"):
        conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)), np.zeros(2), 1, 1)


# Architectures

def test_architecture_names_normalize():
    assert normalize_arch_name("CNN") == "cnn"
    assert normalize_arch_name("Fully-C600") == "fully-c600"
    assert normalize_arch_name("fully_c800600") == "fully-c800600"
    assert normalize_arch_name("fullyc800") == "fully-c800"
    with pytest.raises(ValueError, match="unknown architecture"):
        normalize_arch_name("resnet")


def test_connection_counts_match_published_budgets():
    totals = {
        "cnn": 1_388_800,
        "fully-c600": 1_200_000,
        "fully-c800": 1_600_000,
        "fully-c800600": 2_000_000,
    }
    for name in ARCH_NAMES:
        net = build_network(name, Rng(0))
        assert count_connections(net.spec)["total"] == totals[name]


def test_cnn_per_layer_connection_breakdown():
    net = build_network("cnn", Rng(0))
    counts = count_connections(net.spec)
    assert counts["0:conv2d"] == 1600 * 4 * 1 * 9
    assert counts["1:conv2d"] == 1600 * 4 * 4 * 9
    assert counts["2:conv2d"] == 400 * 8 * 4 * 9
    assert counts["3:conv2d"] == 400 * 8 * 8 * 9
    assert counts["4:conv2d"] == 100 * 16 * 8 * 9
    assert counts["5:dense"] == 1600 * 400


def test_cnn_layer_layout():
    net = build_network("cnn", Rng(0))
    kinds = [ls.kind for ls in net.spec.layers]
    assert kinds == [
        "noise", "conv2d", "noise", "conv2d", "noise", "conv2d",
        "noise", "conv2d", "noise", "conv2d", "dropout", "noise", "dense",
    ]
    shapes = layer_output_shapes(net.spec)
    assert shapes[-1] == (400,)
    assert net.spec.output_units == 400
    # spatial extent halves twice: 20x80 -> 10x40 -> 5x20
    conv_shapes = [s for ls, s in zip(net.spec.layers, shapes) if ls.kind == "conv2d"]
    assert conv_shapes == [(4, 20, 80), (4, 20, 80), (8, 10, 40), (8, 10, 40), (16, 5, 20)]


def test_fully_connected_layouts():
    for name, widths in {
        "fully-c600": [600, 400],
        "fully-c800": [800, 400],
        "fully-c800600": [800, 600, 400],
    }.items():
        net = build_network(name, Rng(0))
        kinds = [ls.kind for ls in net.spec.layers]
        assert kinds == ["noise", "dense"] * len(widths)
        dense_outs = [ls.out_units for ls in net.spec.layers if ls.kind == "dense"]
        assert dense_outs == widths


def test_initial_parameters():
    net = build_network("fully-c600", Rng(4))
    for i in net.weighted_indices():
        st = net.states[i]
        ls = net.spec.layers[i]
        bound = 1.0 / np.sqrt(ls.in_units)
        assert np.max(np.abs(st.W)) <= bound
        assert np.all(st.b == 0.0)
    other = build_network("fully-c600", Rng(4))
    assert networks_equal(net, other)
    assert not networks_equal(net, build_network("fully-c600", Rng(5)))


def test_spec_validation():
    with pytest.raises(ValueError, match="in_channels"):
        LayerSpec(kind="conv2d", out_channels=2, kernel=3, padding=1, stride=1)
    with pytest.raises(ValueError, match="drop_prob"):
        LayerSpec(kind="dropout", drop_prob=1.0)
    with pytest.raises(ValueError, match="sigma"):
        LayerSpec(kind="noise", sigma=-0.5)
    with pytest.raises(ValueError, match="unknown layer kind"):
        LayerSpec(kind="pool")
    with pytest.raises(ValueError, match="layers"):
        NetworkSpec("x", (), LIF, (1, 2, 2))
    with pytest.raises(ValueError, match="dense expects"):
        layer_output_shapes(
            NetworkSpec(
                "x",
                (LayerSpec(kind="dense", in_units=5, out_units=2),),
                LIF,
                (1, 2, 2),
            )
        )


# Simulation

def _tiny_net(seed=0):
    layers = [
        LayerSpec(kind="noise", sigma=0.1),
        LayerSpec(kind="dense", in_units=12, out_units=6),
        LayerSpec(kind="noise", sigma=0.1),
        LayerSpec(kind="dense", in_units=6, out_units=4),
    ]
    return network_from_specs(layers, LIF, (1, 3, 4), Rng(seed), init_scale=3.0)


def _tiny_batch(seed=1, steps=20):
    rng = Rng(seed)
    imgs = [rng.uniform(size=(3, 4)) for _ in range(2)]
    return encode_batch(imgs, steps, rng.child(9))


def test_forward_rates_are_step_fractions():
    net = _tiny_net()
    batch = _tiny_batch()
    rates, trace = forward(net, batch)
    assert rates.shape == (2, 4)
    assert np.all(rates >= 0.0) and np.all(rates <= 1.0)
    scaled = rates * batch.steps
    assert np.allclose(scaled, np.round(scaled))
    assert len(trace.u[0]) == batch.steps
    assert len(trace.u) == 2


def test_forward_is_deterministic():
    net = _tiny_net()
    batch = _tiny_batch()
    a, _ = forward(net, batch)
    b, _ = forward(net, batch)
    assert np.array_equal(a, b)


def test_noise_fires_only_in_training_mode():
    net = _tiny_net()
    batch = _tiny_batch()
    plain, _ = forward(net, batch)
    eval_with_rng, _ = forward(net, batch, rng=Rng(5), training=False)
    assert np.array_equal(plain, eval_with_rng)
    # membrane traces must differ once noise is injected
    _, tr_a = forward(net, batch)
    _, tr_b = forward(net, batch, rng=Rng(5), training=True)
    assert not np.allclose(tr_a.u[0][0], tr_b.u[0][0])


def test_training_mode_requires_rng():
    with pytest.raises(ValueError, match="rng"):
        forward(_tiny_net(), _tiny_batch(), training=True)


def test_smooth_mode_emits_graded_output():
    net = _tiny_net()
    batch = _tiny_batch()
    rates, trace = forward(net, batch, smooth=True)
    assert trace.smooth
    vals = np.concatenate([o.ravel() for o in trace.o[0]])
    assert np.any((vals > 0.0) & (vals < 1.0))


def test_batch_shape_mismatch_is_rejected():
    net = _tiny_net()
    rng = Rng(0)
    bad = encode_batch([rng.uniform(size=(4, 4))], 5, rng)
    with pytest.raises(ValueError, match="does not match network input"):
        forward(net, bad)


def test_dropout_scales_preserve_expectation():
    layers = [
        LayerSpec(kind="dropout", drop_prob=0.5),
        LayerSpec(kind="dense", in_units=12, out_units=4),
    ]
    net = network_from_specs(layers, LifParams(v_th=1e9, tau=1.0), (1, 3, 4), Rng(3))
    dense = np.ones((300, 1, 3, 4, 1), dtype=np.uint8)
    batch = SpikeTrainBatch.from_dense(dense)
    _, trace = forward(net, batch, rng=Rng(8), training=True)
    kept = trace.inputs[0][0]
    # inverted scaling keeps the mean input near its eval value of 1
    assert set(np.unique(kept)) <= {0.0, 2.0}
    assert abs(kept.mean() - 1.0) < 0.1


# Checkpoints

def test_checkpoint_round_trip(tmp_path):
    net = build_network("fully-c600", Rng(6))
    path = str(tmp_path / "model.ck")
    save_checkpoint(net, path, extra={"epoch": 3, "test_iou": 0.5})
    loaded, extra = load_checkpoint(path)
    assert networks_equal(net, loaded)
    assert extra == {"epoch": 3, "test_iou": 0.5}
    batch = encode_batch([Rng(1).uniform(size=(20, 80))], 6, Rng(2))
    a, _ = forward(net, batch)
    b, _ = forward(loaded, batch)
    assert np.array_equal(a, b)


def test_checkpoint_without_extra_defaults_to_empty(tmp_path):
    net = _tiny_net()
    path = str(tmp_path / "m.ck")
    save_checkpoint(net, path)
    _, extra = load_checkpoint(path)
    assert extra == {}


def test_checkpoint_error_paths(tmp_path):
    net = _tiny_net()
    good = str(tmp_path / "good.ck")
    save_checkpoint(net, good)
    raw = open(good, "rb").read()

    bad_magic = str(tmp_path / "bad_magic.ck")
    with open(bad_magic, "wb") as f:
        f.write(b"NOPE\n" + raw)
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(bad_magic)

    truncated = str(tmp_path / "trunc.ck")
    with open(truncated, "wb") as f:
        f.write(raw[:-16])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(truncated)

    trailing = str(tmp_path / "trail.ck")
    with open(trailing, "wb") as f:
        f.write(raw + b"\x00" * 8)
    with pytest.raises(DataError, match="trailing"):
        load_checkpoint(trailing)

    with pytest.raises(DataError, match="missing file"):
        load_checkpoint(str(tmp_path / "absent.ck"))
