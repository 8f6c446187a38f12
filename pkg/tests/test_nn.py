import numpy as np
import pytest

from lusgate.nn import (
    Activation,
    Conv,
    Dense,
    Flatten,
    Head,
    Hyperparams,
    MaxPool,
    ModelFormatError,
    NetworkSpec,
    NumericError,
    SpecError,
    build_network,
    discriminator_spec,
    dumps_model,
    forward,
    gradient_check,
    load_model,
    loads_model,
    parse_spec,
    reconstructor_spec,
    run,
    save_model,
    train_supervised,
    vgg_spec,
)
from lusgate.nn.engine import backward, softmax


def tiny_spec(loss="cross-entropy", head="softmax", units=2):
    return NetworkSpec((8, 8, 1), (
        Conv((3, 3), 4), Activation("relu"), MaxPool(2, 2), Flatten(), Dense(units), Head(head),
    ), loss)


# -- specs ---------------------------------------------------------------------


@pytest.mark.parametrize("spec", [vgg_spec((32, 32, 1)), reconstructor_spec((16, 16, 1)),
                                  discriminator_spec((16, 16, 1)), tiny_spec("binary-cross-entropy", "sigmoid", 1)])
def test_canonical_text_round_trips(spec):
    again = parse_spec(spec.canonical())
    assert again == spec
    assert again.hash() == spec.hash()


def test_vgg_shapes_chain():
    spec = vgg_spec((64, 64, 1), n_classes=2, widths=(8, 16, 32))
    # three 2x2 pools halve 64 three times
    assert spec.shapes()[spec.layers.index(Flatten()) - 1] == (8, 8, 32)
    assert spec.output_shape == (2,)


def test_reconstructor_is_image_to_image():
    spec = reconstructor_spec((64, 64, 1))
    assert spec.output_shape == (64, 64, 1)


@pytest.mark.parametrize("layers, loss, match", [
    ((Conv((3, 3), 4), Flatten(), Dense(2), Head("softmax")), "nonsense", "unknown loss"),
    ((Flatten(), Head("softmax")), "cross-entropy", "no trainable"),
    ((Flatten(), Dense(2), Head("softmax"), Dense(2)), "cross-entropy", "head must be the last"),
    ((Flatten(), Dense(1), Head("sigmoid")), "cross-entropy", "softmax head"),
    ((Flatten(), Dense(2), Head("softmax")), "binary-cross-entropy", "sigmoid head"),
    ((Conv((3, 3), 4), Dense(2)), "mean-squared-error", "layer 1"),
    ((Conv((9, 9), 4, padding="valid"),), "mean-squared-error", "layer 0"),
])
def test_bad_specs_rejected(layers, loss, match):
    with pytest.raises(SpecError, match=match):
        NetworkSpec((8, 8, 1), layers, loss)


def test_unparseable_spec_line():
    with pytest.raises(SpecError):
        parse_spec("input 8x8x1\nwobble 3\nloss cross-entropy\n")
    with pytest.raises(SpecError):
        parse_spec("conv 3x3 4 s1 same\n")


def test_batch_shape_mismatch(rng):
    params = build_network(tiny_spec(), seed=0)
    with pytest.raises(SpecError, match="does not match"):
        forward(params, rng.random((2, 9, 8, 1)))


# -- forward / backward ----------------------------------------------------------


def test_build_is_deterministic():
    a, b = build_network(vgg_spec((16, 16, 1)), 5), build_network(vgg_spec((16, 16, 1)), 5)
    c = build_network(vgg_spec((16, 16, 1)), 6)
    assert all(np.array_equal(x, y) for x, y in zip(a.flat(), b.flat()))
    assert not all(np.array_equal(x, y) for x, y in zip(a.flat(), c.flat()))


def test_softmax_rows_sum_to_one(rng):
    p = forward(build_network(tiny_spec(), 1), rng.random((5, 8, 8, 1)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert softmax(np.array([[1000.0, 0.0]]))[0, 0] == 1.0


def test_dense_layer_matches_matmul(rng):
    spec = NetworkSpec((2, 2, 1), (Flatten(), Dense(3)), "mean-squared-error")
    params = build_network(spec, 0)
    x = rng.random((4, 2, 2, 1))
    W, b = params.weights[1]
    np.testing.assert_allclose(forward(params, x), x.reshape(4, -1) @ W + b)


def test_conv_matches_direct_correlation(rng):
    spec = NetworkSpec((5, 5, 1), (Conv((3, 3), 1, padding="valid"),), "mean-squared-error")
    params = build_network(spec, 0)
    x = rng.random((1, 5, 5, 1))
    W, b = params.weights[0]
    out = forward(params, x)[0, :, :, 0]
    want = np.array([[np.sum(x[0, i:i + 3, j:j + 3, 0] * W[:, :, 0, 0]) + b[0] for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(out, want)


def test_maxpool_ties_route_gradient_to_first_cell():
    spec = NetworkSpec((2, 2, 1), (MaxPool(2, 2), Flatten(), Dense(1)), "mean-squared-error")
    params = build_network(spec, 0)
    x = np.ones((1, 2, 2, 1))
    logits, tape = run(params, x)
    _, dx = backward(params, tape, np.ones_like(logits))
    w = params.weights[2][0][0, 0]
    # the top-left cell wins a tie; the others get nothing
    np.testing.assert_array_equal(dx[0, :, :, 0], [[w, 0.0], [0.0, 0.0]])


def test_non_finite_input_raises_numeric_error():
    params = build_network(tiny_spec(), 0)
    x = np.zeros((1, 8, 8, 1))
    x[0, 0, 0, 0] = np.inf
    with pytest.raises(NumericError):
        forward(params, x)


def test_non_finite_weights_fail_validation():
    params = build_network(tiny_spec(), 0)
    bad = [list(w) for w in params.weights]
    bad[0][0] = np.full_like(bad[0][0], np.nan)
    with pytest.raises(NumericError):
        params.with_weights(bad).validate()


# -- gradients -------------------------------------------------------------------


@pytest.mark.parametrize("spec, make_y", [
    (vgg_spec((16, 16, 1), widths=(4, 8), dense_units=8), lambda r: r.integers(0, 2, 3)),
    (tiny_spec("binary-cross-entropy", "sigmoid", 1), lambda r: r.integers(0, 2, (3, 1)).astype(float)),
    (reconstructor_spec((16, 16, 1), code_units=8), lambda r: r.random((3, 16, 16, 1))),
    (discriminator_spec((16, 16, 1)), lambda r: r.integers(0, 2, (3, 1)).astype(float)),
])
def test_backprop_matches_central_differences(spec, make_y, rng):
    params = build_network(spec, 2)
    x = rng.random((3,) + spec.input_shape)
    loss = "mean-squared-error" if spec.loss == "adversarial-generator" else None
    assert gradient_check(params, x, make_y(rng), loss=loss, n_samples=60) < 1e-4


def test_gradient_check_notices_a_wrong_gradient(rng, monkeypatch):
    import lusgate.nn.train as train

    params = build_network(tiny_spec(), 0)
    x, y = rng.random((4, 8, 8, 1)), rng.integers(0, 2, 4)
    real = train.backward

    def doubled(*a, **k):
        grads, dx = real(*a, **k)
        return [tuple(2 * g for g in layer) for layer in grads], dx

    monkeypatch.setattr(train, "backward", doubled)
    assert gradient_check(params, x, y) > 0.3


def test_gradient_check_rejects_bad_epsilon(rng):
    with pytest.raises(ValueError):
        gradient_check(build_network(tiny_spec(), 0), rng.random((2, 8, 8, 1)), [0, 1], epsilon=0)


# -- training ---------------------------------------------------------------------


def _toy(rng, n=64):
    x = rng.random((n, 8, 8, 1)) * 0.2
    y = rng.integers(0, 2, n)
    x[y == 1, 2:6, 2:6, 0] += 0.8
    return x, y


def test_training_is_deterministic_and_learns(rng):
    x, y = _toy(rng)
    hyper = Hyperparams(learning_rate=0.05, epochs=8, batch_size=16, seed=4)
    a, hist_a = train_supervised(build_network(tiny_spec(), 1), x, y, hyper)
    b, hist_b = train_supervised(build_network(tiny_spec(), 1), x, y, hyper)
    assert hist_a == hist_b
    assert all(np.array_equal(u, v) for u, v in zip(a.flat(), b.flat()))
    assert hist_a[-1] < hist_a[0]
    assert np.mean(forward(a, x).argmax(axis=1) == y) > 0.9


def test_training_input_errors(rng):
    params = build_network(tiny_spec(), 0)
    hyper = Hyperparams(epochs=1)
    with pytest.raises(ValueError, match="empty"):
        train_supervised(params, np.zeros((0, 8, 8, 1)), np.zeros(0, int), hyper)
    with pytest.raises(ValueError, match="length"):
        train_supervised(params, rng.random((3, 8, 8, 1)), [0, 1], hyper)
    with pytest.warns(RuntimeWarning, match="single-class"):
        train_supervised(params, rng.random((3, 8, 8, 1)), [1, 1, 1], hyper)


@pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(epochs=0), dict(batch_size=0), dict(optimizer="adam")])
def test_bad_hyperparams(kwargs):
    with pytest.raises(ValueError):
        Hyperparams(**kwargs)


# -- serialization ----------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_model_round_trip_is_bit_exact(tmp_path, dtype):
    params = build_network(vgg_spec((16, 16, 1)), 3, dtype).with_weights(
        build_network(vgg_spec((16, 16, 1)), 3, dtype).weights, seed=3, history=[0.5, 0.25])
    path = save_model(params, tmp_path / "m.lgm")
    again = load_model(path)
    assert again.spec == params.spec
    assert again.train_meta == params.train_meta
    for u, v in zip(params.flat(), again.flat()):
        assert u.dtype == v.dtype
        assert u.tobytes() == v.tobytes()
    assert dumps_model(again) == path.read_bytes()


def test_corrupt_model_files_are_rejected():
    data = dumps_model(build_network(tiny_spec(), 0))
    with pytest.raises(ModelFormatError, match="header"):
        loads_model(b"not a model\n" + data)
    with pytest.raises(ModelFormatError, match="truncated"):
        loads_model(data[:-10])
    with pytest.raises(ModelFormatError):
        loads_model(data.replace(b"conv 3x3 4", b"conv 3x3 5"))
    with pytest.raises(ModelFormatError):
        loads_model(b"")
