"""Repository plumbing: synthetic data, image folders, run config, plots.

The synthetic task is built so that every training mechanism has a known
ground truth at desk scale: patch content is drawn from per-class texture
libraries (recoverable from pixels), while the class layout is shuffled
and rolled per image so position carries no information about the label.
A model that encodes position instead of content scores at chance on it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import network, trainer
from .masking import MaskSpec
from .rng import substream

log = logging.getLogger("maskclust")

LAYOUTS = ("blocks", "single")

# channel statistics used to normalize decoded images (the usual ImageNet
# constants); synthetic data is already zero-centered and skips this
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406])
CHANNEL_STD = np.array([0.229, 0.224, 0.225])


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    image_size: int = 32
    patch_size: int = 8
    n_variants: int = 8
    noise_level: float = 0.1
    texture_seed: int = 0
    layout: str = "blocks"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.layout == "blocks" and self.lattice_patches % self.n_classes != 0:
            raise ValueError("block layout needs patch count divisible by n_classes")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.n_variants < 1:
            raise ValueError("n_variants must be >= 1")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")

    @property
    def lattice_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def lattice_patches(self) -> int:
        return self.lattice_side**2


def build_texture_library(spec: SyntheticSpec) -> np.ndarray:
    """(classes, variants, ps, ps, 3) tile array, fixed by texture_seed.

    Each class has a core pattern shared by all its variants plus a
    variant-specific perturbation, so same-class tiles are nearby in pixel
    space and across-class tiles are not.
    """
    rng = substream(spec.texture_seed, "textures")
    ps = spec.patch_size
    core = rng.uniform(-1.0, 1.0, size=(spec.n_classes, 1, ps, ps, 3))
    deltas = rng.uniform(-1.0, 1.0, size=(spec.n_classes, spec.n_variants, ps, ps, 3))
    return core + 0.35 * deltas


def _label_grid(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    side = spec.lattice_side
    n = spec.lattice_patches
    if spec.layout == "single":
        return np.full((side, side), rng.integers(spec.n_classes), dtype=np.int64)
    # contiguous equal blocks in raster order, classes shuffled per image,
    # then a random lattice roll; the per-position class marginal is uniform
    block_of = (np.arange(n) * spec.n_classes) // n
    perm = rng.permutation(spec.n_classes)
    grid = perm[block_of].reshape(side, side)
    shift = (int(rng.integers(side)), int(rng.integers(side)))
    return np.roll(grid, shift, axis=(0, 1))


def generate_synthetic(
    spec: SyntheticSpec, count: int, seed: int, offset: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic image stream with per-patch ground-truth labels.

    Returns (images (count, S, S, 3), labels (count, patches)). Sample i
    of a stream is a pure function of (spec, seed, offset + i), so batches
    can be cut anywhere without replaying the stream.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    library = build_texture_library(spec)
    side, ps = spec.lattice_side, spec.patch_size
    images = np.empty((count, spec.image_size, spec.image_size, 3))
    labels = np.empty((count, spec.lattice_patches), dtype=np.int64)
    for i in range(count):
        rng = substream(seed, "synthetic", offset + i)
        grid = _label_grid(spec, rng)
        variants = rng.integers(spec.n_variants, size=(side, side))
        tiles = library[grid, variants]
        if spec.noise_level > 0:
            tiles = tiles + spec.noise_level * rng.standard_normal(tiles.shape)
        img = tiles.transpose(0, 2, 1, 3, 4).reshape(spec.image_size, spec.image_size, 3)
        images[i] = img
        labels[i] = grid.reshape(-1)
    return images, labels


def synthetic_batch_fn(spec: SyntheticSpec, batch_size: int, seed: int):
    """Training data source: batch for step t covers stream indices
    [t * batch_size, (t+1) * batch_size)."""

    def batch_fn(step: int) -> np.ndarray:
        images, _ = generate_synthetic(spec, batch_size, seed, offset=step * batch_size)
        return images

    return batch_fn


# -- image folders ----------------------------------------------------------------


def _sample_crop_box(height, width, scale, ratio, rng):
    """Random area-and-aspect crop box (top, left, h, w), torchvision style."""
    area = height * width
    for _ in range(10):
        target = rng.uniform(*scale) * area
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        w = int(round(np.sqrt(target * aspect)))
        h = int(round(np.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height and scale[0] <= (h * w) / area <= scale[1]:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: central crop at the nearest valid aspect
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, min(int(round(width / ratio[0])), height)
    elif in_ratio > ratio[1]:
        h, w = height, min(int(round(height * ratio[1])), width)
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _to_float(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return (arr[:, :, :3] - CHANNEL_MEAN) / CHANNEL_STD


def load_image_folder(
    path,
    resolution: int = 224,
    mode: str = "train",
    crop_scale: tuple[float, float] = (0.6, 1.0),
    hflip: bool = True,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Decode and preprocess every readable image under a directory.

    train mode applies a random resized crop in the given area range plus
    an optional horizontal flip; eval mode resizes the short side to
    resolution * 256 / 224 and center-crops. Output channels are
    normalized. If the directory contains class subdirectories, labels are
    the sorted subdirectory indices, otherwise -1. Unreadable files are
    skipped with a warning; an empty folder is an error.
    """
    from PIL import Image

    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    entries = []
    subdirs = sorted(
        d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d))
    )
    if subdirs:
        for ci, d in enumerate(subdirs):
            droot = os.path.join(path, d)
            entries.extend(
                (os.path.join(droot, f), ci) for f in sorted(os.listdir(droot))
            )
    else:
        entries = [
            (os.path.join(path, f), -1)
            for f in sorted(os.listdir(path))
            if os.path.isfile(os.path.join(path, f))
        ]
    images, labels, names = [], [], []
    rng = substream(seed, "folder-augment")
    ratio = (3.0 / 4.0, 4.0 / 3.0)
    for fname, label in entries:
        try:
            with Image.open(fname) as im:
                im = im.convert("RGB")
                if mode == "train":
                    top, left, h, w = _sample_crop_box(im.height, im.width, crop_scale, ratio, rng)
                    im = im.resize(
                        (resolution, resolution),
                        Image.BILINEAR,
                        box=(left, top, left + w, top + h),
                    )
                    arr = _to_float(im)
                    if hflip and rng.random() < 0.5:
                        arr = arr[:, ::-1].copy()
                else:
                    short = int(round(resolution * 256 / 224))
                    scale_f = short / min(im.width, im.height)
                    im = im.resize(
                        (int(round(im.width * scale_f)), int(round(im.height * scale_f))),
                        Image.BILINEAR,
                    )
                    left = (im.width - resolution) // 2
                    top = (im.height - resolution) // 2
                    im = im.crop((left, top, left + resolution, top + resolution))
                    arr = _to_float(im)
        except OSError as err:
            log.warning("skipping unreadable image %s: %s", fname, err)
            continue
        images.append(arr)
        labels.append(label)
        names.append(fname)
    if not images:
        raise ValueError(f"no readable images under {path}")
    return np.stack(images), np.asarray(labels, dtype=np.int64), names


# -- run configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    """Flat run configuration; keys mirror the pretraining recipe names.

    The documented key mapping lives in the README. Unknown keys in a
    config file are hard errors.
    """

    seed: int = 0
    # network
    image_size: int = 32
    patch_size: int = 8
    enc_depth: int = 4
    enc_dim: int = 64
    enc_heads: int = 4
    pred_depth: int | None = None
    pred_dim: int | None = None
    pred_heads: int | None = None
    n_registers: int = 16
    mlp_ratio: float = 4.0
    stochastic_depth: float = 0.2
    norm_eps: float = 1e-5
    rope_freq_min: float = 7e-4
    rope_freq_max: float = 7.0
    # optimization
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    clustering_lr_ratio: float = 0.5
    patch_embed_lr_ratio: float = 0.2
    norm_wd_ratio: float = 0.1
    total_steps: int = 2000
    warmup_length: float = 0.10
    cosine_truncation: float = 0.20
    final_lr_floor: float = 0.0
    # masking and augmentation
    masking_type: str = "inverse_block_roll"
    masking_ratio: float = 0.65
    num_pred_targets: int = 7
    min_crop_scale: float = 0.6
    max_crop_scale: float = 1.0
    hflip: bool = True
    # clustering objective
    num_prototypes: int = 64
    student_temperature: float = 0.12
    teacher_temperature: float = 0.06
    num_sk_iter: int = 3
    sk_mode: str = "positionwise"
    mi_window: int = 50
    # probes
    probe_epochs: int = 10
    probe_batch_size: int = 64
    probe_head_width: int = 64

    def network_config(self) -> network.NetworkConfig:
        return network.NetworkConfig(
            patch_size=self.patch_size,
            enc_depth=self.enc_depth,
            enc_dim=self.enc_dim,
            enc_heads=self.enc_heads,
            pred_depth=self.pred_depth,
            pred_dim=self.pred_dim,
            pred_heads=self.pred_heads,
            n_reg=self.n_registers,
            mlp_ratio=self.mlp_ratio,
            stochastic_depth=self.stochastic_depth,
            rope_freq_min=self.rope_freq_min,
            rope_freq_max=self.rope_freq_max,
            norm_eps=self.norm_eps,
        )

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            batch_size=self.batch_size,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
            adam_betas=(self.adam_beta1, self.adam_beta2),
            clustering_lr_ratio=self.clustering_lr_ratio,
            patch_embed_lr_ratio=self.patch_embed_lr_ratio,
            norm_wd_ratio=self.norm_wd_ratio,
            mask=MaskSpec(self.masking_type, self.masking_ratio),
            n_pred=self.num_pred_targets,
            crop_scale=(self.min_crop_scale, self.max_crop_scale),
            hflip=self.hflip,
            sk_mode=self.sk_mode,
            mi_window=self.mi_window,
        )

    def schedule(self) -> trainer.Schedule:
        return trainer.Schedule(
            total_steps=self.total_steps,
            peak_lr=self.learning_rate,
            warmup_fraction=self.warmup_length,
            cosine_truncation=self.cosine_truncation,
            final_lr_floor=self.final_lr_floor,
        )

    def head_kwargs(self) -> dict:
        return {
            "n_prototypes": self.num_prototypes,
            "tau_student": self.student_temperature,
            "tau_teacher": self.teacher_temperature,
            "sk_iters": self.num_sk_iter,
        }


_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(raw: str, target_type):
    if target_type is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    return target_type(raw.strip())


_FIELD_TYPES = {
    f.name: t
    for f, t in (
        (f, {"int": int, "float": float, "str": str, "bool": bool,
             "int | None": int, "float | None": float}[f.type])
        for f in dataclasses.fields(RunConfig)
    )
}


def parse_config(text: str) -> RunConfig:
    """Parse a flat ``key = value`` document; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(raw, _FIELD_TYPES[key])
        except ValueError as err:
            raise ValueError(f"line {lineno}: bad value for {key}: {err}") from err
    return RunConfig(**values)


def serialize_config(config: RunConfig) -> str:
    """Emit every field as ``key = value``; None (derive-at-build) fields
    are omitted so the round trip is the identity."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        val = getattr(config, f.name)
        if val is None:
            continue
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


# -- metrics plots -----------------------------------------------------------------


def read_metrics(path) -> list[dict]:
    """Parse a line-delimited metrics log, skipping malformed records."""
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["step"]
            except (json.JSONDecodeError, TypeError, KeyError) as err:
                log.warning("skipping malformed metrics record at line %d: %s", lineno, err)
                continue
            records.append(rec)
    if not records:
        raise ValueError(f"no usable metrics records in {path}")
    return records


MI_THRESHOLD = 0.05  # nats; the positional-collapse alarm line drawn on plots


def emit_plots(metrics_path, out_dir) -> dict:
    """Render loss curves, the lr/momentum schedule, and the position-MI
    trace; returns {plot name: {file, series...}} with the plotted arrays."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_metrics(metrics_path)
    os.makedirs(out_dir, exist_ok=True)
    steps = np.array([r["step"] for r in records])

    def series(key):
        return np.array([r.get(key, np.nan) for r in records])

    out = {}

    fig, ax = plt.subplots(figsize=(7, 4))
    mim, cluster = series("mim_loss"), series("cluster_loss")
    ax.plot(steps, mim, marker=".", label="masked prediction")
    ax.plot(steps, cluster, marker=".", label="clustering")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (nats)")
    ax.legend()
    path = os.path.join(out_dir, "losses.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    out["losses"] = {"file": path, "step": steps, "mim_loss": mim, "cluster_loss": cluster}

    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    lr, momentum = series("lr"), series("momentum")
    axes[0].plot(steps, lr, marker=".")
    axes[0].set_ylabel("lr")
    axes[1].plot(steps, momentum, marker=".")
    axes[1].set_ylabel("teacher momentum")
    axes[1].set_xlabel("step")
    path = os.path.join(out_dir, "schedule.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    out["schedule"] = {"file": path, "step": steps, "lr": lr, "momentum": momentum}

    fig, ax = plt.subplots(figsize=(7, 4))
    mi = series("position_mi")
    ax.plot(steps, mi, marker=".", label="position MI")
    ax.axhline(MI_THRESHOLD, color="tab:red", linestyle="--", label="collapse threshold")
    ax.set_xlabel("step")
    ax.set_ylabel("I(position; cluster) (nats)")
    ax.legend()
    path = os.path.join(out_dir, "position_mi.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    out["position_mi"] = {"file": path, "step": steps, "position_mi": mi}
    return out
