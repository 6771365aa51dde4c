import numpy as np
import pytest

from alignkit.errors import FormatError, InputTooSmall, ShapeMismatch
from alignkit.extractors import (
    ConvLayer,
    ConvStack,
    ExtractorSpec,
    extract,
    init_conv_stack,
    load_stack,
    save_stack,
)
from alignkit.grid import FeatureGrid
from alignkit.tensorio import save_fgt1


def ramp_grid(h=8, w=8):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return FeatureGrid((xs + 0.5 * ys)[None])


def test_identity_extract_returns_same_grid():
    g = ramp_grid()
    out, s = extract(ExtractorSpec.identity(), g)
    assert s == 1
    np.testing.assert_array_equal(out.data, g.data)


def test_normalize_extract():
    g = ramp_grid()
    out, s = extract(ExtractorSpec.normalized(), g)
    assert s == 1
    assert out.data.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.data.std() == pytest.approx(1.0, abs=1e-12)


def test_one_by_one_kernel_doubles_ramp():
    layer = ConvLayer(np.full((1, 1, 1, 1), 2.0), np.zeros(1), 1, "none")
    stack = ConvStack([layer])
    g = ramp_grid()
    out, s = extract(ExtractorSpec.conv(stack), g)
    assert s == 1
    np.testing.assert_allclose(out.data, 2.0 * g.data)


def test_stride_two_shape():
    stack = ConvStack([ConvLayer(np.zeros((1, 1, 3, 3)), np.zeros(1), 2, "none")])
    out, s = extract(ExtractorSpec.conv(stack), FeatureGrid(np.zeros((1, 9, 9))))
    assert out.shape == (1, 4, 4)  # floor((9-3)/2)+1
    assert s == 2


def test_output_shape_formula_randomized():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n_layers = rng.integers(1, 4)
        channels = [1] + list(rng.integers(1, 5, n_layers))
        kernels = list(rng.integers(1, 4, n_layers))
        strides = list(rng.integers(1, 3, n_layers))
        stack = init_conv_stack(channels, kernels, strides, seed=int(rng.integers(1 << 30)))
        h, w = int(rng.integers(20, 40)), int(rng.integers(20, 40))
        eh, ew = h, w
        for k, s in zip(kernels, strides):
            eh = (eh - k) // s + 1
            ew = (ew - k) // s + 1
        y = stack.forward(np.zeros((1, h, w)))
        assert y.shape == (channels[-1], eh, ew)
        assert stack.output_shape(h, w) == (eh, ew)


def test_total_stride():
    assert init_conv_stack((1, 4, 4, 4), (3, 3, 3), (1, 2, 2), 0).total_stride == 4


def test_relu_between_layers():
    stack = init_conv_stack(seed=0)
    assert stack.layers[0].activation == "relu"
    assert stack.layers[1].activation == "none"


def test_relu_clips_negative_preactivations():
    layer0 = ConvLayer(np.full((1, 1, 1, 1), -1.0), np.zeros(1), 1, "relu")
    layer1 = ConvLayer(np.full((1, 1, 1, 1), 1.0), np.zeros(1), 1, "none")
    out = ConvStack([layer0, layer1]).forward(np.ones((1, 3, 3)))
    np.testing.assert_array_equal(out, 0.0)


def test_init_deterministic():
    a = init_conv_stack(seed=123)
    b = init_conv_stack(seed=123)
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.weights, lb.weights)
        np.testing.assert_array_equal(la.bias, lb.bias)


def test_init_seeds_differ():
    a = init_conv_stack(seed=1)
    b = init_conv_stack(seed=2)
    assert any(
        not np.array_equal(la.weights, lb.weights) for la, lb in zip(a.layers, b.layers)
    )


def test_init_bound():
    # Cin=1, k=3 -> bound 1/3; with many draws the max should approach it.
    stack = init_conv_stack((1, 64), (3,), (1,), seed=5)
    w = stack.layers[0].weights
    assert np.abs(w).max() <= 1 / 3
    assert np.abs(w).max() > 0.3


def test_input_too_small():
    stack = init_conv_stack(seed=0)
    with pytest.raises(InputTooSmall):
        stack.forward(np.zeros((1, 2, 2)))
    with pytest.raises(InputTooSmall):
        stack.output_shape(5, 5)  # second layer output would be 1x1


def test_channel_mismatch_rejected():
    l0 = ConvLayer(np.zeros((4, 1, 3, 3)), np.zeros(4))
    l1 = ConvLayer(np.zeros((4, 8, 3, 3)), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        ConvStack([l0, l1])


def test_layer_validation():
    with pytest.raises(ShapeMismatch):
        ConvLayer(np.zeros((4, 1, 3, 2)), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        ConvLayer(np.zeros((4, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        ConvLayer(np.zeros((4, 1, 3, 3)), np.zeros(4), activation="tanh")
    with pytest.raises(ValueError):
        ConvLayer(np.full((1, 1, 1, 1), np.nan), np.zeros(1))


def test_spec_validation():
    with pytest.raises(ValueError):
        ExtractorSpec("fourier")
    with pytest.raises(ValueError):
        ExtractorSpec("conv_stack")
    with pytest.raises(ValueError):
        ExtractorSpec("external_file")


def test_checkpoint_round_trip(tmp_path):
    stack = init_conv_stack(seed=7)
    path = tmp_path / "stack.ckpt"
    save_stack(path, stack, {"step": "42", "val_loss": "0.125"})
    back, extra = load_stack(path)
    assert extra == {"step": "42", "val_loss": "0.125"}
    assert len(back.layers) == len(stack.layers)
    for la, lb in zip(stack.layers, back.layers):
        np.testing.assert_array_equal(la.weights, lb.weights)
        np.testing.assert_array_equal(la.bias, lb.bias)
        assert (la.stride, la.activation) == (lb.stride, lb.activation)


def test_checkpoint_preserves_float64(tmp_path):
    stack = init_conv_stack(seed=3)
    stack.layers[0].weights[0, 0, 0, 0] = 1 / 3  # not representable in float32
    path = tmp_path / "s.ckpt"
    save_stack(path, stack)
    back, _ = load_stack(path)
    assert back.layers[0].weights[0, 0, 0, 0] == 1 / 3


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not-a-checkpoint 1\n")
    with pytest.raises(FormatError):
        load_stack(path)


def test_checkpoint_truncated(tmp_path):
    stack = init_conv_stack(seed=0)
    path = tmp_path / "t.ckpt"
    save_stack(path, stack)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(FormatError):
        load_stack(path)


def test_checkpoint_trailing_garbage(tmp_path):
    stack = init_conv_stack(seed=0)
    path = tmp_path / "g.ckpt"
    save_stack(path, stack)
    with open(path, "ab") as fp:
        fp.write(b"zz")
    with pytest.raises(FormatError):
        load_stack(path)


def test_external_file_extract(tmp_path):
    feats = np.random.default_rng(0).standard_normal((4, 16, 16)).astype(np.float32)
    path = tmp_path / "f.fgt1"
    save_fgt1(path, feats)
    image = FeatureGrid(np.zeros((1, 32, 32)))
    out, s = extract(ExtractorSpec.external(path, 2), image)
    assert s == 2
    np.testing.assert_array_equal(out.data, feats)


def test_external_file_stride_mismatch(tmp_path):
    feats = np.zeros((4, 15, 16), dtype=np.float32)
    path = tmp_path / "f.fgt1"
    save_fgt1(path, feats)
    image = FeatureGrid(np.zeros((1, 32, 32)))
    with pytest.raises(ShapeMismatch):
        extract(ExtractorSpec.external(path, 2), image)
