import math

import numpy as np
import pytest

from mclnn import gradcheck
from mclnn.data import Pipeline, Standardizer
from mclnn.layers import GeometryError
from mclnn.network import (MAGIC, ConfigError, ModelConfig, ModelFileError, build_model, load_model,
                           masked_equivalent, model_backward, model_forward, model_from_bytes, model_to_bytes,
                           pool_input_frames, save_model, segment_width)
from mclnn.numkernel import Rng
from test_layers import oracle_layer


def small_config(**kw):
    base = dict(input_features=6, layers=[{"width": 5, "order": 1, "mask": {"bandwidth": 3, "overlap": 1}}],
                extra_frames=2, classes=3, dense_widths=[7, 6], dropout=[0.5, 0.5], seed=1)
    base.update(kw)
    return ModelConfig(**base)


def test_segment_width_reference_values():
    assert segment_width([15], 50) == 80
    assert segment_width([14], 40) == 68
    assert segment_width([1, 1], 1) == 5
    assert segment_width([2, 3, 1], 4) == 16


@pytest.mark.parametrize("orders,k", [([0], 1), ([1], 0), ([], 3), ([2, -1], 1)])
def test_segment_width_rejects(orders, k):
    with pytest.raises(ConfigError):
        segment_width(orders, k)


def test_uniform_output_for_zero_model():
    cfg = small_config(transfer="identity", dropout=[0.0, 0.0])
    model = build_model(cfg)
    for p in model.parameters().values():
        p[...] = 0.0
    probs = model_forward(model, Rng(0).normal((6, model.geometry.q)))
    np.testing.assert_array_equal(probs, np.full(3, 1 / 3))


def test_two_layer_order_one_leaves_one_frame():
    cfg = ModelConfig(input_features=4, layers=[{"width": 3, "order": 1}, {"width": 3, "order": 1}],
                      extra_frames=1, classes=2, dense_widths=[4])
    model = build_model(cfg)
    assert model.geometry.q == 5
    assert pool_input_frames(model, np.zeros((4, 5))) == 1


def composition_oracle(model, x):
    """Straight-line forward pass in eval mode, from loop-level pieces."""
    h = x
    for p in model.conditional:
        w = p.weights if p.mask is None else p.weights * p.mask.matrix
        h = oracle_layer(h, w, p.bias, p.slope)
    if model.config.pool == "mean":
        v = np.array([sum(row) / len(row) for row in h])
    elif model.config.pool == "max":
        v = np.array([max(row) for row in h])
    else:
        v = np.concatenate([h[:, t] for t in range(h.shape[1])])
    for d in model.dense:
        z = np.array([d.bias[j] + sum(v[i] * d.weights[i, j] for i in range(len(v)))
                      for j in range(d.weights.shape[1])])
        v = np.array([zj if zj > 0 else d.slope[j] * zj for j, zj in enumerate(z)])
    o = model.output
    logits = [o.bias[j] + sum(v[i] * o.weights[i, j] for i in range(len(v))) for j in range(o.weights.shape[1])]
    top = max(logits)
    ex = [math.exp(z - top) for z in logits]
    return np.array([e / sum(ex) for e in ex])


@pytest.mark.parametrize("pool", ["mean", "max", "flatten"])
def test_forward_matches_composition_oracle(pool):
    cfg = small_config(pool=pool, layers=[{"width": 5, "order": 1, "mask": {"bandwidth": 3, "overlap": 1}},
                                          {"width": 4, "order": 2}])
    model = build_model(cfg, Rng(7))
    for name, p in model.parameters().items():
        if name.endswith("bias"):
            p[...] = Rng(len(name)).normal(p.shape) * 0.3
    x = Rng(8).normal((6, model.geometry.q))
    np.testing.assert_allclose(model_forward(model, x), composition_oracle(model, x), rtol=0, atol=1e-10)


def test_forward_wrong_width_names_q():
    model = build_model(small_config())
    with pytest.raises(GeometryError, match="q=4"):
        model_forward(model, np.zeros((6, 5)))
    with pytest.raises(GeometryError):
        model_forward(model, np.zeros((5, 4)))


def test_probabilities_sum_to_one():
    model = build_model(small_config())
    p = model_forward(model, Rng(2).normal((10, 6, 4)) * 5)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_eval_mode_is_deterministic():
    model = build_model(small_config())
    x = Rng(3).normal((6, 4))
    assert np.array_equal(model_forward(model, x), model_forward(model, x, rng=Rng(1)))


def test_training_mode_uses_dropout():
    model = build_model(small_config())
    x = Rng(3).normal((6, 4))
    assert not np.array_equal(model_forward(model, x), model_forward(model, x, training=True, rng=Rng(1)))


def test_certain_prediction_gives_zero_loss_and_gradient():
    model = build_model(small_config(dropout=[0.0, 0.0]))
    for p in model.parameters().values():
        p[...] = 0.0
    model.output.bias[2] = 1000.0
    loss, grads = model_backward(model, Rng(0).normal((6, 4)), 2)
    assert loss == 0.0
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("pool", ["mean", "max", "flatten"])
def test_full_model_finite_differences(pool):
    errs = gradcheck.check_model(Rng(11), pool=pool)
    assert max(errs.values()) <= 1e-6, errs


def test_logit_gradient_identity():
    model = build_model(small_config(dropout=[0.0, 0.0]))
    x = Rng(5).normal((2, 6, 4))
    y = np.array([0, 2])
    _, grads = model_backward(model, x, y)
    probs = model_forward(model, x)
    onehot = np.eye(3)[y]
    np.testing.assert_allclose(grads["output.bias"], (probs - onehot).mean(axis=0), rtol=0, atol=1e-15)


def test_backward_rejects_bad_target():
    model = build_model(small_config())
    with pytest.raises(ValueError):
        model_backward(model, np.zeros((6, 4)), 3)
    with pytest.raises(ValueError):
        model_backward(model, np.zeros((6, 4)), -1)


def test_masked_weights_gradients_zero():
    model = build_model(small_config(dropout=[0.0, 0.0]))
    _, grads = model_backward(model, Rng(4).normal((3, 6, 4)), [0, 1, 2])
    mask = model.conditional[0].mask.matrix
    assert np.all(grads["cond0.weights"][:, mask == 0] == 0.0)


def test_masking_commutes_with_storage():
    model = build_model(small_config(dropout=[0.0, 0.0]))
    model.conditional[0].weights[...] = Rng(1).normal(model.conditional[0].weights.shape)
    folded = masked_equivalent(model)
    assert np.all(folded.conditional[0].mask.matrix == 1.0)
    x = Rng(2).normal((5, 6, 4))
    np.testing.assert_array_equal(model_forward(folded, x), model_forward(model, x))


def test_save_load_roundtrip(tmp_path):
    st = Standardizer(Rng(0).normal(6), Rng(1).uniform(0.5, 2.0, 6))
    model = build_model(small_config(pool="max"), Rng(3), Pipeline(True, st))
    path = tmp_path / "m.bin"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config == model.config
    assert loaded.geometry == model.geometry
    for k, v in model.parameters().items():
        assert loaded.parameters()[k].tobytes() == v.tobytes()
    np.testing.assert_array_equal(loaded.conditional[0].mask.matrix, model.conditional[0].mask.matrix)
    assert loaded.conditional[0].mask.spec == model.conditional[0].mask.spec
    assert loaded.pipeline.standardizer.mean.tobytes() == st.mean.tobytes()
    x = Rng(9).normal((4, 6, 4))
    assert np.array_equal(model_forward(loaded, x), model_forward(model, x))
    assert model_to_bytes(loaded) == path.read_bytes()


def test_file_layout_is_little_endian_column_major(tmp_path):
    model = build_model(small_config())
    buf = model_to_bytes(model)
    assert buf.startswith(MAGIC) and MAGIC[:7] == b"MCLNN01"
    w = model.conditional[0].weights
    assert w.ravel(order="F").astype("<f8").tobytes() in buf


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMODEL" + b"\0" * 64)
    with pytest.raises(ModelFileError, match="magic"):
        load_model(path)


def test_load_rejects_corruption_and_truncation():
    buf = bytearray(model_to_bytes(build_model(small_config())))
    flipped = bytes(buf[:200]) + bytes([buf[200] ^ 1]) + bytes(buf[201:])
    with pytest.raises(ModelFileError, match="corrupt"):
        model_from_bytes(flipped)
    with pytest.raises(ModelFileError):
        model_from_bytes(bytes(buf[:-50]))


def test_load_rejects_version_mismatch():
    import json
    import struct
    import zlib

    buf = model_to_bytes(build_model(small_config()))
    (hlen,) = struct.unpack("<I", buf[8:12])
    header = json.loads(buf[12:12 + hlen])
    header["format_version"] = 99
    hb = json.dumps(header, sort_keys=True).encode()
    body = buf[:8] + struct.pack("<I", len(hb)) + hb + buf[12 + hlen:-4]
    with pytest.raises(ModelFileError, match="version"):
        model_from_bytes(body + struct.pack("<I", zlib.crc32(body)))


def test_large_config_builds():
    cfg = ModelConfig(input_features=120, layers=[{"width": 300, "order": 15,
                                                   "mask": {"bandwidth": 20, "overlap": -5}}],
                      extra_frames=50, classes=10)
    model = build_model(cfg)
    assert model.geometry.q == 80
    assert model.conditional[0].weights.shape == (31, 120, 300)
    assert cfg.dense_widths == [100, 100]
    probs = model_forward(model, Rng(0).normal((120, 80)))
    assert probs.shape == (10,)


@pytest.mark.parametrize("kw", [
    dict(classes=1), dict(layers=[]), dict(pool="median"), dict(dropout=[1.0, 0.0]),
    dict(layers=[{"width": 5, "order": 1, "mask": {"bandwidth": 9, "overlap": 0}}]),
    dict(layers=[{"width": 5, "order": 0}]), dict(transfer="sigmoid"),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


def test_config_from_dict_rejects_unknown_keys():
    d = small_config().to_dict()
    d["bogus"] = 1
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict(d)
