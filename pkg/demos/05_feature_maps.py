"""Looking at what the encoder learned: PCA maps and cluster grids.

Patch features are projected onto their first three principal components
and rendered as RGB, one pixel block per patch: patches with similar
features get similar colors. The balanced-assignment grids show which
prototype each patch is assigned to. On the synthetic mosaics both
should recover the block layout of the texture classes.

    python3 demos/05_feature_maps.py
"""

import os

import numpy as np

from maskclust import objective, probes, trainer, workbench

RUN = os.path.join(os.path.dirname(__file__), "output", "toy_run")


def main():
    ckpt = os.path.join(RUN, "checkpoint_final.npz")
    if not os.path.exists(ckpt):
        raise SystemExit("run demos/03_toy_pretrain.py first")
    state, net_config, train_config, _ = trainer.load_checkpoint(ckpt)

    spec = workbench.SyntheticSpec(patch_size=net_config.patch_size, image_size=32)
    images, patch_labels = workbench.generate_synthetic(spec, 6, seed=123)
    feats = probes.extract_patch_features(images, state.teacher)
    side = spec.lattice_side

    maps = probes.pca_feature_map(feats, (side, side), per_image=True)
    out = os.path.join(RUN, "maps")
    os.makedirs(out, exist_ok=True)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # balanced hard assignments, the same quantity the training targets use
    logits = objective.compute_logits(feats.reshape(-1, feats.shape[-1]), state.head)
    targets = objective.sinkhorn_positionwise(
        logits.reshape(len(images), side * side, -1),
        state.head.tau_teacher,
        state.head.sk_iters,
    )
    grids = objective.hard_assignments(targets).reshape(len(images), side, side)

    fig, axes = plt.subplots(4, len(images), figsize=(2 * len(images), 8))
    for i in range(len(images)):
        pixel = (images[i] - images[i].min()) / (np.ptp(images[i]) + 1e-9)
        axes[0, i].imshow(pixel)
        axes[1, i].imshow(patch_labels[i].reshape(side, side), cmap="tab10", vmin=0, vmax=9)
        axes[2, i].imshow(maps[i])
        axes[3, i].imshow(grids[i], cmap="tab20")
        for ax in axes[:, i]:
            ax.set_xticks([]), ax.set_yticks([])
    for row, name in enumerate(["image", "true classes", "PCA of features", "cluster grid"]):
        axes[row, 0].set_ylabel(name, fontsize=9)
    path = os.path.join(out, "feature_maps.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    print("wrote:", path)

    agreement = (grids.reshape(len(images), -1) == patch_labels).mean()
    print(f"note: clusters are unlabeled; {len(np.unique(grids))} prototypes in use "
          f"(raw index agreement with classes {agreement:.2f} is meaningless, "
          "look for consistent coloring within blocks instead)")


if __name__ == "__main__":
    main()
