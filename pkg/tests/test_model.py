import numpy as np
import pytest

from shuffleconv import tensor as T
from shuffleconv.model import Model, load_checkpoint, param_table, save_checkpoint
from shuffleconv.shuffle import ShuffleStream
from shuffleconv.zoo import (
    MODEL_NAMES, LayerDesc, ModelSpec, SurgeryPlan, apply_surgery, build_model, build_resnet_bottleneck,
    build_vgg, build_vgg_tiny, conv, count_params,
)

from conftest import assert_grad_close, numeric_grad, numeric_grad_at


def surgery_points(spec):
    yield spec
    for k in range(1, spec.countable_count + 1):
        yield apply_surgery(spec, SurgeryPlan("gapfc", k))
        yield apply_surgery(spec, SurgeryPlan("spatial", k))


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_enumerated_params_match_closed_form(name):
    base = build_model(name)
    for spec in surgery_points(base):
        assert Model(spec, seed=None).num_params() == count_params(spec)


def test_param_table_names_are_unique():
    names = [n for n, *_ in param_table(build_resnet_bottleneck("50"))]
    assert len(names) == len(set(names))


def three_layer_cnn():
    layers = (conv(2, 3, countable=True), LayerDesc("relu"), LayerDesc("maxpool", {"k": 2, "stride": 2, "pad": 0}),
              conv(3, 4, countable=True), LayerDesc("relu"), LayerDesc("flatten"),
              LayerDesc("linear", {"in": 4 * 2 * 2, "out": 3, "bias": True}))
    return ModelSpec("cnn3", layers, (2, 4, 4), 3)


def loss_of(model, x, y, stream_seed=None):
    stream = ShuffleStream(stream_seed) if stream_seed is not None else None
    return T.softmax_cross_entropy(model.forward(T.Tensor(x), training=True, stream=stream), y)


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_cnn_gradients(seed):
    spec = three_layer_cnn()
    model = Model(spec, seed=seed)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((3, 2, 4, 4)), rng.integers(0, 3, 3)
    T.backward(loss_of(model, x, y))
    for name, p in model.params.items():
        f = lambda: float(loss_of(model, x, y).data)  # noqa: E731
        with T.no_grad():
            num = numeric_grad(f, p.data)
        assert_grad_close(p.grad, num, rtol=1e-4), name


@pytest.mark.parametrize("mech", ["spatial", "channel", "patch:1"])
def test_bottleneck_gradients_with_frozen_stream(mech):
    spec = build_resnet_bottleneck("tiny", input_shape=(3, 8, 8), classes=3, width=2)
    name, _, p = mech.partition(":")
    spec = apply_surgery(spec, SurgeryPlan(name, 2, int(p) if p else None, share_skip_permutation=False))
    model = Model(spec, seed=1)
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((2, 3, 8, 8)), np.array([0, 2])
    # running BN statistics move on every training forward; freeze them for the numeric pass
    T.backward(loss_of(model, x, y, 5))
    snapshot = {k: (b.mean.copy(), b.var.copy()) for k, b in model.buffers.items()}
    checked = 0
    for pname in ("5.conv2.weight", "6.proj.weight", "5.conv1.bn.gamma", "0.weight"):
        if pname not in model.params:
            continue
        param = model.params[pname]

        def f():
            for k, (m, v) in snapshot.items():
                model.buffers[k].mean[...] = m
                model.buffers[k].var[...] = v
            return float(loss_of(model, x, y, 5).data)

        with T.no_grad():
            idx, num = numeric_grad_at(f, param.data, 24)
        assert_grad_close(param.grad.reshape(-1)[idx], num, rtol=1e-4)
        checked += 1
    assert checked == 4


@pytest.mark.parametrize("name", ["vgg-tiny", "resnet-tiny", "mlp"])
@pytest.mark.parametrize("mech", ["none", "spatial", "channel", "patch:2", "gapfc"])
def test_every_surgered_spec_runs_forward(name, mech):
    spec = build_model(name, input_shape=(3, 16, 16), classes=5)
    if mech != "none" and spec.countable_count:
        m, _, p = mech.partition(":")
        spec = apply_surgery(spec, SurgeryPlan(m, spec.countable_count, int(p) if p else None))
    model = Model(spec, seed=0)
    out = model.forward(T.Tensor(np.zeros((2, 3, 16, 16))), stream=ShuffleStream(0, "eval"))
    assert out.shape == (2, 5)


def test_shuffle_model_requires_stream():
    spec = apply_surgery(build_vgg_tiny(), SurgeryPlan("spatial", 1))
    with pytest.raises(ValueError, match="ShuffleStream"):
        Model(spec).forward(np.zeros((1, 3, 16, 16)))


def test_with_spec_shares_parameters():
    model = Model(build_vgg_tiny(), seed=0)
    view = model.with_spec(apply_surgery(model.spec, SurgeryPlan("channel", 3)))
    assert all(view.params[k] is model.params[k] for k in model.params)
    with pytest.raises(ValueError):
        model.with_spec(apply_surgery(model.spec, SurgeryPlan("gapfc", 3)))


def test_shared_skip_uses_same_channel_maps():
    # with identical widths, sharing makes the skip and residual permutations identical
    spec = ModelSpec("one-block", (LayerDesc("bottleneck", {"in": 4, "mid": 4, "out": 4, "stride": 1, "bn": False,
                                                              "shuffle": "spatial", "patch": 0, "share_skip": True},
                                             countable=True),
                                   LayerDesc("gap"), LayerDesc("flatten"),
                                   LayerDesc("linear", {"in": 4, "out": 2, "bias": True})), (4, 3, 3), 2)
    stream = ShuffleStream(0)
    stream.next_step()
    from shuffleconv.shuffle import draw_permutation
    a = draw_permutation("spatial", (4, 3, 3), stream.rng(0, 0))
    b = draw_permutation("spatial", (4, 3, 3), stream.rng(0, 1))
    assert not np.array_equal(a.index, b.index)
    assert Model(spec).forward(np.ones((1, 4, 3, 3)), stream=ShuffleStream(0)).shape == (1, 2)


def test_checkpoint_round_trip(tmp_path):
    spec = apply_surgery(build_resnet_bottleneck("tiny", (3, 8, 8), 3), SurgeryPlan("spatial", 1))
    model = Model(spec, seed=3)
    model.forward(np.random.default_rng(0).standard_normal((4, 3, 8, 8)), training=True, stream=ShuffleStream(1))
    path = tmp_path / "m.npz"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.spec == spec
    for k in model.params:
        assert back.params[k].data.tobytes() == model.params[k].data.tobytes()
    for k in model.buffers:
        assert back.buffers[k].var.tobytes() == model.buffers[k].var.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, a=np.zeros(2))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_param_mismatch_rejected():
    model = Model(build_vgg_tiny(), seed=0)
    other = build_vgg((8, "M"), (3, 16, 16), 4)
    with pytest.raises(ValueError):
        Model(other, params=model.params)
