"""Synthetic alignment-pair generation.

Pairs are sampled from a SourceSet of co-registered frames (same scene,
different capture conditions): pick a location and patch size, take the
template from one frame, take a padded patch from another frame, and warp
the padded patch by a bounded random homography.  The padding exists so the
warped image keeps content wherever the ground-truth warp sends the
template ("no cutoff regions").

Frame layout of an emitted pair:

  - ``gt_warp`` maps template coordinates to image *content* coordinates,
    i.e. both sides use the patch's own frame with origin at the patch
    top-left.  The padded image array places that origin at ``(pad, pad)``,
    so the array-coordinate warp is ``translation(pad, pad) . gt_warp``.
  - ``image[v] = source_patch(gt_warp^-1(v - pad))``: the padded patch
    resampled so that solving image-against-template recovers ``gt_warp``.

Everything is a pure function of (sources, config, seed): identical seeds
give bit-identical pairs.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateConfiguration,
    FormatError,
    RejectionBudgetExhausted,
    ShapeMismatch,
    SourceTooSmall,
)
from .grid import FeatureGrid, warp_grid
from .tensorio import load_image, save_fgt1
from .training import corner_error_pct
from .warp import Homography, grid_corners, homography_from_corner_offsets

REJECTION_BUDGET = 1000
# Corner-offset box half-width as a multiple of (bound/100 * patch): sized so
# the mean no-op error of raw draws sits at the bound and rejection trims the
# upper tail, keeping the accepted maximum tight against the bound.
_BOX_FACTOR = 1.3


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ----------------------------------------------------------------------
# photometric perturbation


@dataclass(frozen=True)
class PhotometricConfig:
    """Half-ranges of the seeded perturbation draws; zeros disable an effect."""

    gain: float = 0.25  # global gain in [1 - gain, 1 + gain]
    bias: float = 0.08
    channel_gain: float = 0.1  # independent per-channel gain jitter
    log_gamma: float = 0.2  # gamma sampled as exp(U(-log_gamma, log_gamma))
    noise_sigma: float = 0.02
    shading: float = 0.15  # low-frequency multiplicative field amplitude

    @staticmethod
    def neutral() -> "PhotometricConfig":
        return PhotometricConfig(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _shading_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth field in [-1, 1]: a few long-wavelength plane waves."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    field = np.zeros((height, width))
    amps = rng.uniform(0.5, 1.0, size=3)
    for amp in amps:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        wavelength = rng.uniform(0.75, 2.0) * max(height, width)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += amp * np.cos(
            2.0 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / wavelength + phase
        )
    return field / amps.sum()


def photometric_perturb(g: FeatureGrid, cfg: PhotometricConfig, seed) -> FeatureGrid:
    """Seeded gain/bias/gamma/noise/shading perturbation, clamped to [0, 1].

    With every magnitude zero the data passes through bit-exactly.  Effects
    whose magnitude is zero draw nothing from the generator, so a given
    config consumes a fixed, reproducible draw sequence.
    """
    if g.channels not in (1, 3):
        raise ShapeMismatch(f"expected 1 or 3 channels, got {g.channels}")
    rng = _as_rng(seed)
    data = g.data.astype(np.float64, copy=True)
    if cfg.log_gamma:
        gamma = math.exp(rng.uniform(-cfg.log_gamma, cfg.log_gamma))
        np.power(np.clip(data, 0.0, 1.0), gamma, out=data)
    if cfg.gain:
        data *= 1.0 + rng.uniform(-cfg.gain, cfg.gain)
    if cfg.channel_gain:
        gains = 1.0 + rng.uniform(-cfg.channel_gain, cfg.channel_gain, size=g.channels)
        data *= gains[:, None, None]
    if cfg.bias:
        data += rng.uniform(-cfg.bias, cfg.bias)
    if cfg.shading:
        data *= 1.0 + cfg.shading * _shading_field(rng, g.height, g.width)
    if cfg.noise_sigma:
        data += rng.normal(0.0, cfg.noise_sigma, size=data.shape)
    np.clip(data, 0.0, 1.0, out=data)
    return FeatureGrid(data)


# ----------------------------------------------------------------------
# source sets


@dataclass(frozen=True)
class SourceSet:
    """Co-registered full frames plus a vertical train/test split.

    The held-out region is the rightmost ceil(test_fraction * width) columns;
    train sampling never touches it and test sampling never leaves it.
    """

    frames: tuple
    names: tuple
    test_fraction: float = 0.0

    def __post_init__(self):
        if not self.frames:
            raise ValueError("source set needs at least one frame")
        shape = self.frames[0].shape
        for name, frame in zip(self.names, self.frames):
            if frame.shape != shape:
                raise ShapeMismatch(
                    f"frame {name!r} has shape {frame.shape}, expected {shape}"
                )
        if self.frames[0].ndim != 3 or shape[0] not in (1, 3):
            raise ShapeMismatch(f"frames must be (C, H, W) with 1 or 3 channels, got {shape}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in [0, 1), got {self.test_fraction}")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def channels(self) -> int:
        return self.frames[0].shape[0]

    @property
    def height(self) -> int:
        return self.frames[0].shape[1]

    @property
    def width(self) -> int:
        return self.frames[0].shape[2]

    @property
    def split_column(self) -> int:
        """First held-out column; equals width when nothing is held out."""
        return self.width - math.ceil(self.test_fraction * self.width)

    def region_columns(self, region: str) -> tuple:
        """Half-open [lo, hi) column range for 'train' or 'test'."""
        if region == "train":
            return 0, self.split_column
        if region == "test":
            return self.split_column, self.width
        raise ValueError(f"region must be 'train' or 'test', got {region!r}")

    def train_mask(self) -> np.ndarray:
        mask = np.zeros((self.height, self.width), dtype=bool)
        mask[:, : self.split_column] = True
        return mask

    def test_mask(self) -> np.ndarray:
        return ~self.train_mask()

    @staticmethod
    def from_manifest(path) -> "SourceSet":
        """Text manifest: '#' comments, optional 'split <fraction>' and
        'mode <gray|rgb>' directives, every other line an image path
        (relative paths resolve against the manifest's directory)."""
        base = os.path.dirname(os.path.abspath(path))
        fraction = 0.0
        mode = "gray"
        paths = []
        with open(path, "r", encoding="utf-8") as fp:
            for lineno, raw in enumerate(fp, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if parts[0] == "split":
                    if len(parts) != 2:
                        raise FormatError(f"{path}:{lineno}: malformed split directive")
                    try:
                        fraction = float(parts[1])
                    except ValueError as e:
                        raise FormatError(f"{path}:{lineno}: bad split fraction") from e
                    if not 0.0 <= fraction < 1.0:
                        raise FormatError(f"{path}:{lineno}: split must be in [0, 1)")
                elif parts[0] == "mode":
                    if len(parts) != 2 or parts[1] not in ("gray", "rgb"):
                        raise FormatError(f"{path}:{lineno}: mode must be gray or rgb")
                    mode = parts[1]
                else:
                    paths.append(line)
        if not paths:
            raise FormatError(f"{path}: manifest lists no images")
        frames = tuple(load_image(os.path.join(base, p), mode=mode) for p in paths)
        return SourceSet(frames, tuple(paths), fraction)

    @staticmethod
    def synthetic(
        num_frames: int,
        height: int,
        width: int,
        seed: int = 0,
        *,
        channels: int = 1,
        smoothness: float = 48.0,
        contrast: float = 0.35,
        perturb: PhotometricConfig | None = None,
    ) -> "SourceSet":
        """Random band-limited texture rendered num_frames times.

        All frames share one underlying scene; when `perturb` is given each
        frame gets its own photometric rendering (synthetic stand-in for
        captures of one scene at different times).
        """
        if num_frames < 1:
            raise ValueError("need at least one frame")
        root = np.random.SeedSequence((int(seed), 0xA11C))
        base = _band_limited_texture(root.spawn(1)[0], height, width, channels, smoothness, contrast)
        frames = []
        names = []
        for i in range(num_frames):
            if perturb is None:
                frames.append(base.copy())
            else:
                frames.append(
                    photometric_perturb(
                        FeatureGrid(base), perturb, np.random.SeedSequence((int(seed), 0xF0, i))
                    ).data
                )
            names.append(f"synthetic:{seed}:{i}")
        return SourceSet(tuple(frames), tuple(names))


def _band_limited_texture(seed_seq, height, width, channels, smoothness, contrast):
    """Smooth random texture in [0.5 - contrast, 0.5 + contrast] via a
    low-pass-filtered white-noise spectrum (dominant wavelength ~smoothness px)."""
    rng = np.random.default_rng(seed_seq)
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    f0 = 1.0 / smoothness
    filt = (1.0 + (np.hypot(fy, fx) / f0) ** 2) ** -2.0
    filt[0, 0] = 0.0  # remove the mean; re-centered at 0.5 below

    def one() -> np.ndarray:
        spec = np.fft.rfft2(rng.standard_normal((height, width)))
        tex = np.fft.irfft2(spec * filt, s=(height, width))
        return tex / np.abs(tex).max()

    if channels == 1:
        stack = one()[None]
    else:
        shared = one()
        stack = np.stack([0.7 * shared + 0.3 * one() for _ in range(channels)])
        stack /= np.abs(stack).max()
    return 0.5 + contrast * stack


def split_train_test(src: SourceSet, test_fraction: float) -> SourceSet:
    """Hold out the rightmost ceil(test_fraction * width) columns."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    return replace(src, test_fraction=test_fraction)


# ----------------------------------------------------------------------
# bounded random warps


def _well_conditioned(h: Homography, corners: np.ndarray) -> bool:
    """Mapped quad stays convex with consistent orientation, the projective
    denominator stays near 1, and the area change is moderate."""
    try:
        quad = h.apply(corners)
    except Exception:
        return False
    if not np.isfinite(quad).all():
        return False
    cross = []
    for i in range(4):
        a = quad[(i + 1) % 4] - quad[i]
        b = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        cross.append(a[0] * b[1] - a[1] * b[0])
    cross = np.array(cross)
    if not (np.all(cross > 0) or np.all(cross < 0)):
        return False
    den = h.m[2, 0] * corners[:, 0] + h.m[2, 1] * corners[:, 1] + h.m[2, 2]
    if np.any(den < 0.3) or np.any(den > 3.0):
        return False
    area = 0.5 * abs(
        np.dot(quad[:, 0], np.roll(quad[:, 1], -1)) - np.dot(quad[:, 1], np.roll(quad[:, 0], -1))
    )
    ref = 0.5 * abs(
        np.dot(corners[:, 0], np.roll(corners[:, 1], -1))
        - np.dot(corners[:, 1], np.roll(corners[:, 0], -1))
    )
    return 0.25 * ref <= area <= 4.0 * ref


def random_bounded_warp(patch_size: int, max_noop_error_pct: float, seed) -> Homography:
    """Random homography whose no-op corner error is at most the bound.

    Corner displacements are drawn uniformly from a square whose half-width
    scales with the bound; draws are rejected until the fitted homography
    respects the bound and is well-conditioned.
    """
    if not 0.0 < max_noop_error_pct <= 50.0:
        raise ValueError(
            f"max_noop_error_pct must be in (0, 50], got {max_noop_error_pct}"
        )
    rng = _as_rng(seed)
    corners = grid_corners(patch_size, patch_size)
    identity = Homography.identity()
    box = _BOX_FACTOR * (max_noop_error_pct / 100.0) * patch_size
    for _ in range(REJECTION_BUDGET):
        offsets = rng.uniform(-box, box, size=(4, 2))
        try:
            h = homography_from_corner_offsets(corners, corners + offsets)
        except DegenerateConfiguration:
            continue
        if corner_error_pct(identity, h, corners, patch_size) > max_noop_error_pct:
            continue
        if not _well_conditioned(h, corners):
            continue
        return h
    raise RejectionBudgetExhausted(
        f"no acceptable warp in {REJECTION_BUDGET} draws "
        f"(patch {patch_size}, bound {max_noop_error_pct}%)"
    )


# ----------------------------------------------------------------------
# pair sampling


@dataclass(frozen=True)
class PairConfig:
    patch_min: int = 175  # satellite-style default range; webcam-style ~150-220
    patch_max: int = 300
    max_noop_error_pct: float = 30.0
    pad_factor: float = 0.35
    photometric: PhotometricConfig | None = None  # extra per-pair image-side jitter

    def __post_init__(self):
        if self.patch_min < 8 or self.patch_max < self.patch_min:
            raise ValueError(
                f"need 8 <= patch_min <= patch_max, got [{self.patch_min}, {self.patch_max}]"
            )
        if not 0.0 < self.max_noop_error_pct <= 50.0:
            raise ValueError("max_noop_error_pct must be in (0, 50]")
        if self.pad_factor <= 0:
            raise ValueError("pad_factor must be positive")


@dataclass(frozen=True)
class PairProvenance:
    template_frame: int
    image_frame: int
    origin_y: int
    origin_x: int
    region: str
    seed_key: str


@dataclass(frozen=True)
class AlignmentPair:
    template: FeatureGrid  # (C, S, S) unwarped patch
    image: FeatureGrid  # (C, S + 2 pad, S + 2 pad) warped padded patch
    gt_warp: Homography  # template frame -> image content frame
    patch_size: int
    pad: int
    provenance: PairProvenance

    def gt_warp_padded(self) -> Homography:
        """The ground truth in padded-array coordinates."""
        return Homography.translation(self.pad, self.pad).compose(self.gt_warp)

    def noop_error_pct(self) -> float:
        corners = grid_corners(self.patch_size, self.patch_size)
        return corner_error_pct(Homography.identity(), self.gt_warp, corners, self.patch_size)


def sample_pair(src: SourceSet, cfg: PairConfig, seed, region: str = "train") -> AlignmentPair:
    """Draw one alignment pair from a source set (pure function of seed).

    Template and warped image come from two distinct frames when the set has
    more than one (single-frame sets reuse the frame for both sides).  The
    warp is redrawn until its mapped corners stay inside the padded extent,
    so every emitted pair satisfies corner containment and the no-op bound.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    patch = int(rng.integers(cfg.patch_min, cfg.patch_max + 1))
    pad = math.ceil(cfg.pad_factor * patch)
    padded = patch + 2 * pad

    if src.num_frames >= 2:
        frame_t, frame_i = (int(v) for v in rng.choice(src.num_frames, size=2, replace=False))
    else:
        frame_t = frame_i = 0

    x_lo, x_hi = src.region_columns(region)
    y_max = src.height - padded
    x_max = x_hi - padded
    if y_max < 0 or x_lo > x_max:
        raise SourceTooSmall(
            f"{region} region {x_hi - x_lo} cols x {src.height} rows cannot hold a "
            f"{padded}x{padded} padded patch (patch {patch}, pad {pad})"
        )
    y0 = int(rng.integers(0, y_max + 1))
    x0 = int(rng.integers(x_lo, x_max + 1))

    corners = grid_corners(patch, patch)
    lo, hi = -float(pad), float(patch - 1 + pad)
    for _ in range(REJECTION_BUDGET):
        warp = random_bounded_warp(patch, cfg.max_noop_error_pct, rng)
        mapped = warp.apply(corners)
        if np.all((mapped >= lo) & (mapped <= hi)):  # corner containment
            break
    else:
        raise RejectionBudgetExhausted(
            f"no contained warp in {REJECTION_BUDGET} draws (patch {patch}, pad {pad})"
        )

    template = FeatureGrid(
        np.ascontiguousarray(
            src.frames[frame_t][:, y0 + pad : y0 + pad + patch, x0 + pad : x0 + pad + patch]
        )
    )
    source_padded = src.frames[frame_i][:, y0 : y0 + padded, x0 : x0 + padded]
    if cfg.photometric is not None:
        source_padded = photometric_perturb(FeatureGrid(source_padded), cfg.photometric, rng).data

    # image[v] samples the source patch at (T_pad . W^-1 . T_pad^-1)(v)
    t_pad = Homography.translation(pad, pad)
    resample = t_pad.compose(warp.inverse()).compose(t_pad.inverse())
    image, _ = warp_grid(FeatureGrid(source_padded), resample, (padded, padded))

    pair = AlignmentPair(
        template,
        image,
        warp,
        patch,
        pad,
        PairProvenance(frame_t, frame_i, y0, x0, region, str(ss.entropy)),
    )
    _revalidate(pair, cfg)
    return pair


def _revalidate(pair: AlignmentPair, cfg: PairConfig) -> None:
    """Re-check emitted-pair invariants instead of trusting the generator."""
    corners = grid_corners(pair.patch_size, pair.patch_size)
    mapped = pair.gt_warp.apply(corners)
    lo, hi = -float(pair.pad), float(pair.patch_size - 1 + pair.pad)
    if not np.all((mapped >= lo) & (mapped <= hi)):
        raise RejectionBudgetExhausted("emitted pair violates corner containment")
    if pair.noop_error_pct() > cfg.max_noop_error_pct + 1e-9:
        raise RejectionBudgetExhausted("emitted pair violates the no-op error bound")


class SourcePairGenerator:
    """Deterministic pair streams for training: counter-keyed sub-seeds.

    training_pair(step, j) draws from the train region under sub-seed
    (seed, 1, step, j); validation_pair(j) draws from the held-out region
    under (seed, 2, j).  Both are pure functions, so any step can be
    regenerated exactly (resume, replay, audit) without streaming state.
    """

    def __init__(self, src: SourceSet, cfg: PairConfig, seed: int):
        if src.test_fraction <= 0.0:
            raise ValueError("generator needs a source set with a held-out split")
        self.src = src
        self.cfg = cfg
        self.seed = int(seed)

    def training_pair(self, step: int, index: int) -> AlignmentPair:
        ss = np.random.SeedSequence((self.seed, 1, int(step), int(index)))
        return sample_pair(self.src, self.cfg, ss, region="train")

    def validation_pair(self, index: int) -> AlignmentPair:
        ss = np.random.SeedSequence((self.seed, 2, int(index)))
        return sample_pair(self.src, self.cfg, ss, region="test")


# ----------------------------------------------------------------------
# export


def dump_pairs(pairs, out_dir) -> None:
    """Write pairs as FGT1 tensors plus a CSV of ground-truth homographies.

    pair_NNNN_template.fgt1 / pair_NNNN_image.fgt1 hold float64 grids; the
    CSV lists the 9 row-major entries of each gt_warp (template frame ->
    image content frame; the padded image array origin sits at (-pad, -pad)
    in that frame, with pad = (image width - template width) / 2).
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = [
        "# alignkit pair dump v1\n",
        "# gt_warp rows: template frame -> image content frame, row-major\n",
        "pair,m00,m01,m02,m10,m11,m12,m20,m21,m22\n",
    ]
    for i, pair in enumerate(pairs):
        save_fgt1(os.path.join(out_dir, f"pair_{i:04d}_template.fgt1"), pair.template.data)
        save_fgt1(os.path.join(out_dir, f"pair_{i:04d}_image.fgt1"), pair.image.data)
        vals = ",".join(f"{v:.9g}" for v in pair.gt_warp.m.ravel())
        lines.append(f"{i:04d},{vals}\n")
    with open(os.path.join(out_dir, "ground_truth.csv"), "w", encoding="utf-8") as fp:
        fp.writelines(lines)
