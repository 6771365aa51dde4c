"""Feature extraction stages.

Four interchangeable extractor kinds map a raw image grid to the feature
grids the solver consumes:

  identity       raw pixels, untouched
  normalize      per-channel zero-mean / unit-std pixels
  conv_stack     a small trainable convolution stack (the learned extractor)
  external_file  a precomputed feature map read from an FGT1 file

Every extractor reports its total spatial stride so callers can map warps
solved in feature coordinates back to image coordinates with
conjugate_by_scale.

The same ConvStack instance is always applied to both the template and the
image — there are no per-side parameters anywhere ("coupled weights").

Checkpoint format (text manifest + FGT1 payloads):

    alignkit-stack 1
    layers <n>
    layer <i> in <cin> out <cout> kernel <k> stride <s> activation <relu|none>
    <extra key> <extra value>     (zero or more metadata lines)
    end
    <FGT1 block: layer 0 weights, shape (Cout, Cin, k*k), float64>
    <FGT1 block: layer 0 bias,    shape (Cout, 1, 1),     float64>
    ... one weights+bias pair per layer ...
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import FormatError, InputTooSmall, ShapeMismatch
from .grid import FeatureGrid, normalize_per_channel
from .tensorio import load_fgt1, read_fgt1, write_fgt1

_ACTIVATIONS = ("none", "relu")


@dataclass
class ConvLayer:
    """One valid (unpadded) convolution layer with optional rectifier."""

    weights: np.ndarray  # (Cout, Cin, k, k)
    bias: np.ndarray  # (Cout,)
    stride: int = 1
    activation: str = "none"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeMismatch(f"weights must be (Cout, Cin, k, k), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch(
                f"bias shape {self.bias.shape} does not match Cout {self.weights.shape[0]}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def cin(self) -> int:
        return self.weights.shape[1]

    @property
    def cout(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


@dataclass
class ConvStack:
    """An ordered list of ConvLayers applied as one fully-convolutional stack."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("stack needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.cin != prev.cout:
                raise ShapeMismatch(
                    f"layer channel mismatch: {prev.cout} outputs feeding {cur.cin} inputs"
                )

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    @property
    def num_params(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def output_shape(self, height: int, width: int) -> tuple:
        """Spatial dims after the whole stack: floor((n - k)/stride) + 1 per layer."""
        h, w = height, width
        for layer in self.layers:
            k, s = layer.kernel, layer.stride
            if h < k or w < k:
                raise InputTooSmall(f"input {h}x{w} smaller than {k}x{k} kernel")
            h = (h - k) // s + 1
            w = (w - k) // s + 1
        if h < 2 or w < 2:
            raise InputTooSmall(f"stack output {h}x{w} too small to sample")
        return h, w

    def forward(self, data: np.ndarray) -> np.ndarray:
        """Run the stack on a (Cin, H, W) array; accumulates in float64."""
        x = np.asarray(data)
        if x.shape[0] != self.layers[0].cin:
            raise ShapeMismatch(
                f"input has {x.shape[0]} channels, stack expects {self.layers[0].cin}"
            )
        self.output_shape(x.shape[1], x.shape[2])
        for layer in self.layers:
            x = _kernels.conv2d_forward(x, layer.weights, layer.bias, layer.stride)
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        return x

    def copy(self) -> "ConvStack":
        return ConvStack(
            [
                ConvLayer(l.weights.copy(), l.bias.copy(), l.stride, l.activation)
                for l in self.layers
            ]
        )


def init_conv_stack(
    channels=(1, 8, 8), kernels=(3, 3), strides=(1, 2), seed: int = 0
) -> ConvStack:
    """Deterministically initialize a stack from its shape description.

    Weights and biases are drawn uniformly in [-b, b] with b = 1/sqrt(Cin*k^2)
    per layer; a rectifier sits between layers, none after the last.
    """
    if not (len(channels) - 1 == len(kernels) == len(strides)):
        raise ShapeMismatch(
            f"inconsistent shape spec: channels {channels}, kernels {kernels}, strides {strides}"
        )
    rng = np.random.default_rng(seed)
    layers = []
    n = len(kernels)
    for i, (cin, cout, k, s) in enumerate(zip(channels, channels[1:], kernels, strides)):
        bound = 1.0 / np.sqrt(cin * k * k)
        w = rng.uniform(-bound, bound, (cout, cin, k, k))
        b = rng.uniform(-bound, bound, cout)
        layers.append(ConvLayer(w, b, s, "relu" if i < n - 1 else "none"))
    return ConvStack(layers)


@dataclass
class ExtractorSpec:
    """Which extractor stage to run; exactly one kind is active."""

    kind: str
    stack: ConvStack = None
    path: str = None
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("identity", "normalize", "conv_stack", "external_file"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "conv_stack" and self.stack is None:
            raise ValueError("conv_stack extractor needs a stack")
        if self.kind == "external_file":
            if self.path is None:
                raise ValueError("external_file extractor needs a path")
            if self.stride < 1:
                raise ValueError("declared stride must be >= 1")

    @classmethod
    def identity(cls) -> "ExtractorSpec":
        return cls("identity")

    @classmethod
    def normalized(cls) -> "ExtractorSpec":
        return cls("normalize")

    @classmethod
    def conv(cls, stack: ConvStack) -> "ExtractorSpec":
        return cls("conv_stack", stack=stack)

    @classmethod
    def external(cls, path, stride: int) -> "ExtractorSpec":
        return cls("external_file", path=str(path), stride=stride)


def extract(spec: ExtractorSpec, image: FeatureGrid):
    """Run the extractor; returns (FeatureGrid, total spatial stride).

    For external_file the image argument supplies the raw dimensions against
    which the declared stride is checked (H_f == H_img // stride).
    """
    if spec.kind == "identity":
        return image, 1
    if spec.kind == "normalize":
        return normalize_per_channel(image), 1
    if spec.kind == "conv_stack":
        return FeatureGrid(spec.stack.forward(image.data)), spec.stack.total_stride
    feats = FeatureGrid(load_fgt1(spec.path))
    want = (image.height // spec.stride, image.width // spec.stride)
    if (feats.height, feats.width) != want:
        raise ShapeMismatch(
            f"feature map {feats.height}x{feats.width} does not match image "
            f"{image.height}x{image.width} at declared stride {spec.stride} "
            f"(expected {want[0]}x{want[1]})"
        )
    return feats, spec.stride


def save_stack(path, stack: ConvStack, extra: dict = None) -> None:
    """Write a stack checkpoint (text manifest + float64 FGT1 payloads)."""
    extra = extra or {}
    with open(path, "wb") as fp:
        lines = ["alignkit-stack 1", f"layers {len(stack.layers)}"]
        for i, l in enumerate(stack.layers):
            lines.append(
                f"layer {i} in {l.cin} out {l.cout} kernel {l.kernel} "
                f"stride {l.stride} activation {l.activation}"
            )
        for k, v in extra.items():
            key = str(k)
            if " " in key or key in ("layer", "layers", "end", "alignkit-stack"):
                raise ValueError(f"bad extra key {key!r}")
            lines.append(f"{key} {v}")
        lines.append("end")
        fp.write(("\n".join(lines) + "\n").encode("ascii"))
        for l in stack.layers:
            write_fgt1(fp, l.weights.reshape(l.cout, l.cin, l.kernel * l.kernel))
            write_fgt1(fp, l.bias.reshape(l.cout, 1, 1))


def load_stack(path):
    """Read a stack checkpoint; returns (ConvStack, extra dict)."""
    with open(path, "rb") as fp:
        header = fp.readline().decode("ascii", "replace").split()
        if header[:1] != ["alignkit-stack"] or header[1:] != ["1"]:
            raise FormatError("not an alignkit stack checkpoint")
        line = fp.readline().decode("ascii", "replace").split()
        if len(line) != 2 or line[0] != "layers":
            raise FormatError("missing layer count")
        n = int(line[1])
        descs = []
        extra = {}
        while True:
            raw = fp.readline().decode("ascii", "replace").rstrip("\n")
            if raw == "end":
                break
            if not raw:
                raise FormatError("unterminated checkpoint manifest")
            if raw.startswith("layer "):
                t = raw.split()
                if len(t) != 12 or t[2::2][:-1] != ["in", "out", "kernel", "stride"]:
                    raise FormatError(f"malformed layer line: {raw!r}")
                descs.append(
                    dict(cin=int(t[3]), cout=int(t[5]), kernel=int(t[7]),
                         stride=int(t[9]), activation=t[11])
                )
            else:
                key, _, value = raw.partition(" ")
                extra[key] = value
        if len(descs) != n:
            raise FormatError(f"expected {n} layer lines, found {len(descs)}")
        layers = []
        for d in descs:
            w = read_fgt1(fp)
            b = read_fgt1(fp)
            if w.shape != (d["cout"], d["cin"], d["kernel"] * d["kernel"]):
                raise FormatError(f"weights payload shape {w.shape} disagrees with manifest {d}")
            if b.shape != (d["cout"], 1, 1):
                raise FormatError(f"bias payload shape {b.shape} disagrees with manifest {d}")
            layers.append(
                ConvLayer(
                    w.reshape(d["cout"], d["cin"], d["kernel"], d["kernel"]).astype(np.float64),
                    b.reshape(d["cout"]).astype(np.float64),
                    d["stride"],
                    d["activation"],
                )
            )
        if fp.read(1):
            raise FormatError("trailing bytes after checkpoint payloads")
    return ConvStack(layers), extra
