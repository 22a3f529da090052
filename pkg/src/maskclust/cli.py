"""Command-line entry points.

Subcommands: pretrain, export-features, probe-classify, probe-segment,
viz-pca, emit-plots. Data arguments accept either an image-folder path or
``synthetic:<spec>`` where the spec is a comma list such as
``classes=4,size=32,patch=8,noise=0.1``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import objective, probes, trainer, workbench
from .rng import substream

_SYNTHETIC_KEYS = {
    "classes": ("n_classes", int),
    "size": ("image_size", int),
    "patch": ("patch_size", int),
    "variants": ("n_variants", int),
    "noise": ("noise_level", float),
    "texture_seed": ("texture_seed", int),
    "layout": ("layout", str),
}


def parse_synthetic_spec(text: str) -> workbench.SyntheticSpec:
    """``classes=4,size=32,...`` after the ``synthetic:`` prefix."""
    kwargs = {}
    if text:
        for item in text.split(","):
            if "=" not in item:
                raise ValueError(f"bad synthetic spec item {item!r}")
            key, raw = item.split("=", 1)
            if key not in _SYNTHETIC_KEYS:
                raise ValueError(
                    f"unknown synthetic spec key {key!r}; known: {sorted(_SYNTHETIC_KEYS)}"
                )
            field, typ = _SYNTHETIC_KEYS[key]
            kwargs[field] = typ(raw)
    return workbench.SyntheticSpec(**kwargs)


def _is_synthetic(data: str) -> bool:
    return data.startswith("synthetic:")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_report(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _report_dict(report: probes.ProbeReport) -> dict:
    return dataclasses.asdict(report)


# -- data loading ------------------------------------------------------------------


def _training_batch_fn(data: str, seed: int, train_config, image_size: int):
    if _is_synthetic(data):
        spec = parse_synthetic_spec(data[len("synthetic:") :])
        return workbench.synthetic_batch_fn(spec, train_config.batch_size, seed)
    images, _, _ = workbench.load_image_folder(
        data,
        resolution=image_size,
        mode="train",
        crop_scale=train_config.crop_scale,
        hflip=train_config.hflip,
        seed=seed,
    )

    def batch_fn(step: int) -> np.ndarray:
        rng = substream(seed, "folder-order", step)
        idx = rng.choice(
            len(images),
            size=train_config.batch_size,
            replace=len(images) < train_config.batch_size,
        )
        return images[idx]

    return batch_fn


def _eval_images(data: str, count: int, data_seed: int, resolution: int):
    """(images, per-patch labels or None, patches-per-side or None)."""
    if _is_synthetic(data):
        spec = parse_synthetic_spec(data[len("synthetic:") :])
        images, labels = workbench.generate_synthetic(spec, count, data_seed)
        return images, labels, spec.lattice_side
    images, image_labels, _ = workbench.load_image_folder(
        data, resolution=resolution, mode="eval"
    )
    return images, image_labels, None


# -- subcommands -------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    config = workbench.load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as f:
        f.write(workbench.serialize_config(config))
    if args.resume:
        state, net_config, train_config, schedule = trainer.load_checkpoint(args.resume)
        print(f"resuming from {args.resume} at step {state.step}")
    else:
        net_config = config.network_config()
        train_config = config.train_config()
        schedule = config.schedule()
        state = trainer.init_state(
            net_config, train_config, config.seed, **config.head_kwargs()
        )
    batch_fn = _training_batch_fn(args.data, state.seed, train_config, config.image_size)

    def on_metrics(m):
        if m["step"] % args.log_every == 0 or m["step"] == schedule.total_steps:
            print(
                f"step {m['step']:>6d}  mim {m['mim_loss']:.4f}  "
                f"cluster {m['cluster_loss']:.4f}  lr {m['lr']:.2e}  "
                f"position_mi {m['position_mi']:.4f}",
                flush=True,
            )

    trainer.pretrain(
        state,
        batch_fn,
        train_config,
        schedule,
        args.out,
        net_config,
        checkpoint_every=args.checkpoint_every,
        on_metrics=on_metrics,
    )
    print(f"final checkpoint: {os.path.join(args.out, 'checkpoint_final.npz')}")
    return 0


def _split_tags(n_images: int, fractions, seed: int) -> np.ndarray:
    f = [float(x) for x in fractions.split(",")]
    if len(f) != 3 or abs(sum(f) - 1.0) > 1e-9 or min(f) < 0:
        raise ValueError("--split-fractions wants three nonnegative numbers summing to 1")
    u = substream(seed, "bank-split").random(n_images)
    tags = np.full(n_images, probes.SPLIT_TEST, dtype=np.int8)
    tags[u < f[0] + f[1]] = probes.SPLIT_VAL
    tags[u < f[0]] = probes.SPLIT_TRAIN
    return tags


def cmd_export_features(args) -> int:
    state, net_config, train_config, _ = trainer.load_checkpoint(args.checkpoint)
    encoder = state.teacher if args.source == "teacher" else state.encoder
    images, labels, side = _eval_images(
        args.data, args.count, args.data_seed, args.resolution
    )
    feats = np.concatenate(
        [
            probes.extract_patch_features(images[i : i + 64], encoder)
            for i in range(0, len(images), 64)
        ]
    )
    b, n, _ = feats.shape
    if labels is None:
        patch_labels = np.full((b, n), -1, dtype=np.int64)
    elif labels.ndim == 1:  # image-level labels cover every patch
        patch_labels = np.repeat(labels[:, None], n, axis=1)
    else:
        patch_labels = labels
    split = _split_tags(b, args.split_fractions, args.data_seed)
    bank = probes.build_patch_bank(feats, patch_labels, split)
    probes.save_bank(args.out, bank)
    print(f"bank: {args.out}  features {bank.features.shape}  "
          f"splits {[int((split == s).sum()) for s in (0, 1, 2)]}")

    if args.assignments_out:
        head = state.head
        logits = objective.compute_logits(
            feats.reshape(-1, feats.shape[-1]), head
        ).reshape(b, n, -1)
        if train_config.sk_mode == "positionwise":
            targets = objective.sinkhorn_positionwise(
                logits, head.tau_teacher, head.sk_iters
            )
        else:
            targets = objective.sinkhorn_standard(
                logits.reshape(b * n, -1), head.tau_teacher, head.sk_iters
            )
        hard = objective.hard_assignments(targets).reshape(b, n)
        if side is None:
            side = int(round(np.sqrt(n)))
        np.savez(
            args.assignments_out,
            grids=hard.reshape(b, side, side),
            lattice=np.array([side, side]),
        )
        print(f"hard assignment grids: {args.assignments_out}")
    return 0


def _bank_to_token_sets(bank: probes.FeatureBank):
    """Regroup a patch bank into per-image token matrices.

    Classification needs one label per image, so every patch of an image
    must carry the same label (export a single-class synthetic layout or
    an image folder for that)."""
    image_ids = bank.provenance[:, 0]
    order = np.lexsort((bank.provenance[:, 1], image_ids))
    ids = image_ids[order]
    uniq, starts, counts = np.unique(ids, return_index=True, return_counts=True)
    if counts.min() != counts.max():
        raise ValueError("bank has a varying number of patches per image")
    n = counts[0]
    feats = bank.features[order].reshape(len(uniq), n, -1)
    labels_per_patch = bank.labels[order].reshape(len(uniq), n)
    if not (labels_per_patch == labels_per_patch[:, :1]).all():
        raise ValueError(
            "patches within an image disagree on the label; image-level "
            "classification needs single-class images"
        )
    split = bank.split[order].reshape(len(uniq), n)[:, 0]
    return feats, labels_per_patch[:, 0], split


def cmd_probe_classify(args) -> int:
    bank = probes.load_bank(args.bank)
    feats, labels, split = _bank_to_token_sets(bank)
    fit = split != probes.SPLIT_TEST  # probe makes its own holdout inside
    test = split == probes.SPLIT_TEST
    test_set = (feats[test], labels[test]) if test.any() else None
    _, report = probes.attentive_probe_train(
        feats[fit],
        labels[fit],
        seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        head_width=args.head_width,
        test_set=test_set,
    )
    payload = {"probe": "attentive", **_report_dict(report)}
    write_report(args.out, payload)
    print(f"val accuracy {report.val_metric:.4f}"
          + (f"  test accuracy {report.test_metric:.4f}" if test_set else ""))
    print(f"report: {args.out}")
    return 0


def cmd_probe_segment(args) -> int:
    bank = probes.load_bank(args.bank)
    if (bank.labels < 0).any():
        raise ValueError("segmentation needs per-patch labels in the bank")
    bank_std, _ = probes.standardize(bank)
    n_classes = int(bank.labels.max()) + 1

    knn_report = probes.knn_probe(bank_std)
    model, logreg_report = probes.logreg_probe(bank_std)
    test_f, test_l = bank_std.subset(probes.SPLIT_TEST)
    extras = {}
    if len(test_f):
        train_f, train_l = bank_std.subset(probes.SPLIT_TRAIN)
        sel = knn_report.selected
        knn_pred = probes.knn_predict(train_f, train_l, test_f, sel["k"], sel["metric"])
        logreg_pred = np.argmax(model.predict_proba(test_f), axis=1)
        extras = {
            "knn_test_miou": probes.mean_iou(knn_pred, test_l, n_classes),
            "logreg_test_miou": probes.mean_iou(logreg_pred, test_l, n_classes),
        }
    payload = {
        "knn": _report_dict(knn_report),
        "logreg": _report_dict(logreg_report),
        **extras,
    }
    write_report(args.out, payload)
    print(f"knn test accuracy {knn_report.test_metric}  "
          f"logreg test accuracy {logreg_report.test_metric}")
    print(f"report: {args.out}")
    return 0


def cmd_viz_pca(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.image as mimage

    state, net_config, _, _ = trainer.load_checkpoint(args.checkpoint)
    encoder = state.teacher if args.source == "teacher" else state.encoder
    images, _, _ = _eval_images(args.data, args.count, args.data_seed, args.resolution)
    feats = probes.extract_patch_features(images, encoder)
    side = int(round(np.sqrt(feats.shape[1])))
    maps = probes.pca_feature_map(feats, (side, side), per_image=not args.global_pca)
    os.makedirs(args.out, exist_ok=True)
    upscale = max(1, args.cell_pixels)
    for i, m in enumerate(maps):
        big = np.kron(m, np.ones((upscale, upscale, 1)))
        path = os.path.join(args.out, f"pca_{i:03d}.png")
        mimage.imsave(path, np.clip(big, 0.0, 1.0))
    print(f"wrote {len(maps)} maps to {args.out}")
    return 0


def cmd_emit_plots(args) -> int:
    made = workbench.emit_plots(args.metrics, args.out)
    for name, info in made.items():
        print(f"{name}: {info['file']}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskclust",
        description="Masked patch prediction with online clustering: training and probes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the self-supervised training loop")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--data", required=True, help="image folder or synthetic:<spec>")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("export-features", help="write a patch feature bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="bank archive path (.npz)")
    p.add_argument("--count", type=int, default=256, help="synthetic sample count")
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--source", choices=("teacher", "student"), default="teacher")
    p.add_argument("--resolution", type=int, default=224, help="eval resolution for folders")
    p.add_argument("--split-fractions", default="0.8,0.1,0.1")
    p.add_argument(
        "--assignments-out",
        default=None,
        help="also write per-image hard cluster assignment grids (.npz)",
    )
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("probe-classify", help="attentive image classification probe")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="report path (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--head-width", type=int, default=64)
    p.set_defaults(func=cmd_probe_classify)

    p = sub.add_parser("probe-segment", help="patch-level knn and logistic probes")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="report path (JSON)")
    p.set_defaults(func=cmd_probe_segment)

    p = sub.add_parser("viz-pca", help="render patch features as RGB component maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for PNGs")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--source", choices=("teacher", "student"), default="teacher")
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--cell-pixels", type=int, default=16, help="upscale factor per patch")
    p.add_argument(
        "--global-pca",
        action="store_true",
        help="fit one shared projection across images instead of per image",
    )
    p.set_defaults(func=cmd_viz_pca)

    p = sub.add_parser("emit-plots", help="render metrics log plots")
    p.add_argument("--metrics", required=True, help="metrics.jsonl path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_emit_plots)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
