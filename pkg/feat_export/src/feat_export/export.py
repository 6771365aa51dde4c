"""Write an intermediate VGG16 activation map for one image as an FGT1 file.

This is a standalone inference script: it shares no code with the alignment
toolkit, only the FGT1 byte layout, which is small enough to restate here:

    bytes 0..3    magic "FGT1"
    bytes 4..15   three uint32 LE: C, H, W
    byte  16      dtype tag: 0 = float32, 1 = float64
    bytes 17..19  reserved zero
    bytes 20..    C*H*W float32 samples, channel-major then row-major, LE

The layer names address the activation just before each pooling stage of the
VGG16 feature trunk; "conv3" (the default) is the 256-channel map at 1/4 of
the input resolution.  Inference is deterministic: eval mode, no grad, CPU,
and --weights random draws from a fixed-seed generator, so identical
invocations produce byte-identical files.  Images are never resized unless
--resize is given explicitly.
"""

from __future__ import annotations

import argparse
import struct
import sys
from dataclasses import dataclass

import numpy as np
from PIL import Image

# layer -> (feature-trunk prefix length, cumulative stride, channels)
LAYERS = {
    "conv1": (4, 1, 64),
    "conv2": (9, 2, 128),
    "conv3": (16, 4, 256),
    "conv4": (23, 8, 512),
    "conv5": (30, 16, 512),
}

# canonical ImageNet-pretraining input normalization
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)

_HEADER = struct.Struct("<4sIIIB3s")


class ExportError(Exception):
    pass


@dataclass
class ExportSpec:
    input_path: str
    output_path: str
    model: str = "vgg16"
    layer: str = "conv3"
    stride: int = None  # declared; defaults to the layer's canonical stride
    weights: str = "random"  # random | pretrained | path to a state dict
    seed: int = 0
    resize: tuple | None = None  # (height, width), explicit opt-in

    def __post_init__(self):
        if self.model != "vgg16":
            raise ExportError(f"unknown model {self.model!r}; only vgg16 is wired up")
        if self.layer not in LAYERS:
            raise ExportError(f"unknown layer {self.layer!r}; pick from {sorted(LAYERS)}")
        if self.stride is None:
            self.stride = LAYERS[self.layer][1]


def load_rgb(path, resize) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]; resizes only when asked to."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resize is not None:
            im = im.resize((resize[1], resize[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.moveaxis(arr, 2, 0)


def build_trunk(spec: ExportSpec):
    """The feature-extractor prefix for the requested layer, ready to run."""
    import torch
    import torchvision

    prefix, _, _ = LAYERS[spec.layer]
    if spec.weights == "random":
        torch.manual_seed(spec.seed)
        model = torchvision.models.vgg16(weights=None)
    elif spec.weights == "pretrained":
        model = torchvision.models.vgg16(
            weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1
        )
    else:
        model = torchvision.models.vgg16(weights=None)
        state = torch.load(spec.weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    trunk = model.features[:prefix]
    trunk.eval()
    return trunk


def write_fgt1(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    c, h, w = arr.shape
    with open(path, "wb") as fp:
        fp.write(_HEADER.pack(b"FGT1", c, h, w, 0, b"\x00\x00\x00"))
        fp.write(arr.tobytes())


def export(spec: ExportSpec):
    """Run the trunk on one image and write the FGT1 file; returns (C, H', W')."""
    import torch

    img = load_rgb(spec.input_path, spec.resize)
    h, w = img.shape[1:]
    x = (img - np.array(MEAN, dtype=np.float32)[:, None, None]) / np.array(
        STD, dtype=np.float32
    )[:, None, None]

    trunk = build_trunk(spec)
    with torch.no_grad():
        y = trunk(torch.from_numpy(x)[None])[0].numpy()

    want = (h // spec.stride, w // spec.stride)
    if y.shape[1:] != want:
        raise ExportError(
            f"declared stride {spec.stride} is inconsistent with {spec.layer}: "
            f"got {y.shape[1]}x{y.shape[2]} activations for a {h}x{w} input, "
            f"expected {want[0]}x{want[1]}"
        )

    write_fgt1(spec.output_path, y)
    with open(spec.output_path + ".preprocess.txt", "w", encoding="utf-8") as fp:
        fp.write(
            f"model {spec.model}\nlayer {spec.layer}\nstride {spec.stride}\n"
            f"weights {spec.weights}\nseed {spec.seed}\n"
            f"input {spec.input_path}\nresize {spec.resize or 'none'}\n"
            f"normalize mean {MEAN} std {STD} on [0,1] RGB\n"
        )
    return y.shape


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="feat-export",
        description="Export an intermediate VGG16 activation map as an FGT1 file.",
    )
    ap.add_argument("input", help="PNG/JPEG image")
    ap.add_argument("output", help="FGT1 path to write")
    ap.add_argument("--model", default="vgg16")
    ap.add_argument("--layer", default="conv3", choices=sorted(LAYERS))
    ap.add_argument("--stride", type=int, default=None,
                    help="declared cumulative stride; checked against output dims "
                    "(default: the layer's own)")
    ap.add_argument("--weights", default="random",
                    help="random (seeded), pretrained, or a state-dict path")
    ap.add_argument("--seed", type=int, default=0, help="seed for --weights random")
    ap.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"), default=None,
                    help="resize the input before inference (never implicit)")
    args = ap.parse_args(argv)

    try:
        spec = ExportSpec(
            input_path=args.input, output_path=args.output, model=args.model,
            layer=args.layer, stride=args.stride, weights=args.weights,
            seed=args.seed, resize=tuple(args.resize) if args.resize else None,
        )
        shape = export(spec)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"({shape[0]}, {shape[1]}, {shape[2]})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
