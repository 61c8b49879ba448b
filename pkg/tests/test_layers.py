import csv
import io
import json

import numpy as np
import pytest

from relaxq.autodiff import RngStream, Tensor, backward, new_tape, softmax_cross_entropy
from relaxq.nn import ForwardContext, ModelSpec, UninitializedGrid, build_model, clustering_report
from relaxq.nn.model import report_csv_rows, report_to_json
from relaxq.quant import Mode, grid_points, hard_quantize, init_grid_params

MLP = [{"type": "dense", "units": 16}, {"type": "dense", "units": 3, "activation": "none"}]
CNN = [
    {"type": "conv", "channels": 4, "kernel": 3, "padding": 1, "batchnorm": True, "quantize_bias": True},
    {"type": "maxpool"},
    {"type": "conv", "channels": 6, "kernel": 3, "batchnorm": True},
    {"type": "maxpool"},
    {"type": "flatten"},
    {"type": "dense", "units": 8, "batchnorm": True},
    {"type": "dense", "units": 3, "activation": "none"},
]


def mlp(bits=4, mode="rq-st", seed=0, **kw):
    return build_model(ModelSpec((5,), MLP, bits_w=bits, bits_a=bits, mode=mode, **kw), seed=seed)


def cnn(bits=4, mode="rq-st", seed=0):
    return build_model(ModelSpec((1, 12, 12), CNN, bits_w=bits, bits_a=bits, mode=mode), seed=seed)


def inputs(shape, n=32, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, *shape))


def snap_weights_to_grid(model):
    for layer in model.compute_layers():
        layer.weight.data = hard_quantize(layer.weight.data, layer.weight_quantizer.grid).data


def test_identity_quantizers_match_plain_network():
    x = inputs((5,))
    quantized = mlp(mode="identity")
    plain = build_model(ModelSpec((5,), MLP, bits_w=None, bits_a=None), seed=0)
    quantized.init_quantizers(x)
    a = quantized.forward(x, "train", RngStream(0)).data
    b = plain.forward(x, "train", RngStream(0)).data
    assert np.array_equal(a, b)
    w1, b1 = plain.layers[0].weight.data, plain.layers[0].bias.data
    w2, b2 = plain.layers[1].weight.data, plain.layers[1].bias.data
    assert np.allclose(b, np.maximum(x @ w1 + b1, 0) @ w2 + b2, atol=1e-14)


def test_eval_hard_is_deterministic():
    model = cnn()
    x = inputs((1, 12, 12))
    model.init_quantizers(x)
    a = model.forward(x, "eval_hard").data
    b = model.forward(x, "eval_hard").data
    assert np.array_equal(a, b)


def test_eval_hard_outputs_grid_activations():
    model = mlp()
    x = inputs((5,))
    model.init_quantizers(x)
    ctx = ForwardContext(phase="eval_hard", bn="running")
    h = model.layers[0].forward(Tensor(x), ctx).data
    assert np.isin(h, grid_points(model.layers[0].activation_quantizer.grid).data).all()


def test_collapse_limit_train_equals_hard():
    spec = ModelSpec((5,), [{"type": "dense", "units": 3, "activation": "none"}], bits_w=4, bits_a=4)
    model = build_model(spec, seed=1)
    x = inputs((5,))
    model.init_quantizers(x)
    q = model.layers[0].weight_quantizer
    q.noise.set_sigma(q.grid.alpha_value * 1e-9)
    snap_weights_to_grid(model)
    train = model.forward(x, "train", RngStream(2)).data
    hard = model.forward(x, "eval_hard").data
    assert np.max(np.abs(train - hard)) < 1e-6


def test_uninitialized_grid_names_layer():
    model = mlp()
    with pytest.raises(UninitializedGrid, match="layer0.weight"):
        model.forward(inputs((5,)), "train", RngStream(0))


def test_unknown_phase():
    with pytest.raises(ValueError, match="phase"):
        ForwardContext(phase="test")


def test_init_quantizers_uses_ranges():
    model = mlp(bits=4)
    x = inputs((5,))
    model.init_quantizers(x)
    w = model.layers[0].weight.data
    alpha, sigma = init_grid_params(w.min(), w.max(), 4, "weights")
    q = model.layers[0].weight_quantizer
    assert q.grid.alpha_value == pytest.approx(alpha)
    assert q.noise.sigma_value == pytest.approx(sigma)
    h = np.maximum(x @ w + model.layers[0].bias.data, 0)
    act_alpha, _ = init_grid_params(h.min(), h.max(), 4, "activations")
    assert model.layers[0].activation_quantizer.grid.alpha_value == pytest.approx(act_alpha)
    assert model.layers[1].activation_quantizer is None


def test_biases_untouched_unless_shared():
    model = mlp()
    x = inputs((5,))
    model.init_quantizers(x)
    layer = model.layers[0]
    for mode in ("rq", "rq-st", "sr", "hard"):
        model.set_mode(mode)
        for phase in ("train", "eval_hard"):
            _, b = layer._weights(ForwardContext(phase=phase, rng=RngStream(0)))
            assert b is layer.bias


def test_shared_bias_grid():
    model = cnn()
    x = inputs((1, 12, 12))
    model.init_quantizers(x)
    layer = model.layers[0]
    layer.bias.data = np.array([0.013, -0.2, 0.31, 0.0])
    _, b = layer._weights(ForwardContext(phase="eval_hard"))
    assert np.isin(b.data, grid_points(layer.weight_quantizer.grid).data).all()


def test_relaxed_and_hard_agree_in_collapse_limit():
    model = mlp(bits=8)
    x = inputs((5,), n=2000, seed=3)
    model.init_quantizers(x)
    snap_weights_to_grid(model)
    for q in model.quantizers().values():
        q.noise.set_sigma(q.grid.alpha_value * 1e-7)
    relaxed = model.forward(x, "eval_relaxed", RngStream(4)).data.argmax(axis=1)
    hard = model.forward(x, "eval_hard").data.argmax(axis=1)
    assert np.mean(relaxed == hard) >= 0.999


@pytest.mark.parametrize("mode", ["rq", "rq-st", "sr"])
def test_one_step_reaches_grid_parameters(mode):
    model = cnn(mode=mode)
    x = inputs((1, 12, 12))
    y = np.arange(32) % 3
    model.init_quantizers(x)
    new_tape()
    backward(softmax_cross_entropy(model.forward(x, "train", RngStream(1)), y))
    alpha_grads = [q.grid.log_alpha.grad for q in model.quantizers().values()]
    assert any(g is not None and g != 0 for g in alpha_grads)
    if mode != "sr":
        sigma_grads = [q.noise.log_sigma.grad for q in model.quantizers().values()]
        assert any(g is not None and g != 0 for g in sigma_grads)
    for layer in model.compute_layers():
        assert np.any(layer.weight.grad != 0)


def test_cnn_shapes_and_errors():
    model = cnn()
    x = inputs((1, 12, 12), n=3)
    model.init_quantizers(x)
    assert model.forward(x, "eval_hard").shape == (3, 3)
    with pytest.raises(ValueError, match="flatten"):
        build_model(ModelSpec((1, 4, 4), [{"type": "dense", "units": 2}]))
    with pytest.raises(ValueError, match="unknown layer type"):
        build_model(ModelSpec((4,), [{"type": "lstm"}]))
    with pytest.raises(ValueError, match="even"):
        build_model(ModelSpec((1, 5, 5), [{"type": "maxpool"}]))


# batchnorm


def test_batchnorm_running_stats_only_in_training():
    model = cnn()
    x = inputs((1, 12, 12))
    model.init_quantizers(x)
    bn = model.batchnorms()[0]
    before = bn.running_mean.copy()
    model.forward(x, "eval_relaxed", RngStream(0))
    model.forward(x, "eval_hard")
    assert np.array_equal(bn.running_mean, before)
    model.forward(x, "train", RngStream(0))
    assert not np.array_equal(bn.running_mean, before)


def test_reestimate_without_batchnorm_is_noop():
    model = mlp()
    model.init_quantizers(inputs((5,)))
    state = model.state_dict()
    model.reestimate_batchnorm([inputs((5,))])
    assert all(np.array_equal(state[k], v) for k, v in model.state_dict().items())


def test_reestimate_constant_input():
    layers = [{"type": "dense", "units": 6, "batchnorm": True}, {"type": "dense", "units": 2, "activation": "none"}]
    model = build_model(ModelSpec((5,), layers, bits_w=4, bits_a=4), seed=0)
    model.init_quantizers(inputs((5,)))
    bn = model.batchnorms()[0]
    gamma = bn.gamma.data.copy()
    model.reestimate_batchnorm([np.full((8, 5), 0.5)] * 2)
    assert np.all(bn.running_var < 1e-12)
    assert np.array_equal(bn.gamma.data, gamma)
    out = model.forward(np.full((2, 5), 0.5), "eval_hard").data
    assert np.all(np.isfinite(out))


def test_reestimate_matches_population_statistics():
    model = cnn()
    x = inputs((1, 12, 12), n=40)
    model.init_quantizers(x)
    model.reestimate_batchnorm([x[:15], x[15:]])
    bn = model.batchnorms()[0]
    ctx = ForwardContext(phase="eval_hard")
    layer = model.layers[0]
    w, b = layer._weights(ctx)
    from relaxq.autodiff import conv2d

    h = conv2d(Tensor(x), w, padding=1).data + b.data.reshape(1, -1, 1, 1)
    assert np.allclose(bn.running_mean, h.mean(axis=(0, 2, 3)), atol=1e-12)
    assert np.allclose(bn.running_var, h.var(axis=(0, 2, 3)), atol=1e-12)


def test_reestimate_empty_iterator():
    model = cnn()
    model.init_quantizers(inputs((1, 12, 12)))
    with pytest.raises(ValueError, match="empty"):
        model.reestimate_batchnorm([])


# state and reports


def test_state_dict_round_trip_and_clone():
    model = cnn()
    model.init_quantizers(inputs((1, 12, 12)))
    state = model.state_dict()
    other = cnn(seed=5)
    other.load_state_dict(state)
    other.load_quantizer_meta(model.quantizer_meta())
    x = inputs((1, 12, 12), n=4)
    assert np.array_equal(model.forward(x, "eval_hard").data, other.forward(x, "eval_hard").data)
    twin = model.clone()
    twin.layers[0].weight.data += 1.0
    assert not np.array_equal(twin.layers[0].weight.data, model.layers[0].weight.data)


def test_clustering_distance_zero_on_grid():
    model = mlp()
    model.init_quantizers(inputs((5,)))
    snap_weights_to_grid(model)
    report = clustering_report(model)
    assert all(entry["mean_grid_distance"] == 0 for entry in report["layers"])


def test_clustering_distance_uniform_cell():
    model = build_model(ModelSpec((200,), [{"type": "dense", "units": 500, "activation": "none"}], bits_w=8),
                        seed=0)
    model.init_quantizers(inputs((200,)))
    layer = model.layers[0]
    alpha = layer.weight_quantizer.grid.alpha_value
    layer.weight.data = (3 + np.random.default_rng(0).uniform(-0.5, 0.5, layer.weight.shape)) * alpha
    dist = clustering_report(model)["layers"][0]["mean_grid_distance"]
    assert dist == pytest.approx(0.25, abs=0.002)


def test_clustering_report_serializes():
    model = mlp()
    model.init_quantizers(inputs((5,)))
    report = clustering_report(model, bins=10)
    parsed = json.loads(report_to_json(report))
    assert [e["layer"] for e in parsed["layers"]] == ["layer0", "layer1"]
    assert len(parsed["layers"][0]["histogram"]["counts"]) == 10
    buf = io.StringIO()
    rows = report_csv_rows(report)
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    assert buf.getvalue().splitlines()[0].startswith("layer,n_weights,bits,alpha")


def test_set_mode():
    model = mlp()
    model.set_mode("hard")
    assert all(q.mode is Mode.HARD for q in model.quantizers().values())
