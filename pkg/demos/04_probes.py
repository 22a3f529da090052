"""Evaluating frozen features with the three probe families.

The encoder from demo 03 is frozen; fresh held-out synthetic data is
pushed through it and only small probes are fit on top:

  * k-NN and L-BFGS logistic regression on individual patch features
    (a patch-level segmentation task: which texture class is this patch?)
  * an attentive probe on whole images (one cross-attention query pools
    the patch set, then a linear classifier) for image-level labels.

    python3 demos/04_probes.py
"""

import os

import numpy as np

from maskclust import probes, trainer, workbench

RUN = os.path.join(os.path.dirname(__file__), "output", "toy_run")


def main():
    ckpt = os.path.join(RUN, "checkpoint_final.npz")
    if not os.path.exists(ckpt):
        raise SystemExit("run demos/03_toy_pretrain.py first")
    state, net_config, _, _ = trainer.load_checkpoint(ckpt)
    encoder = state.teacher  # evaluation reads the EMA weights

    # --- patch-level probes on mosaic images --------------------------------
    spec = workbench.SyntheticSpec(
        patch_size=net_config.patch_size, image_size=32
    )
    images, patch_labels = workbench.generate_synthetic(spec, 240, seed=99)
    feats = probes.extract_patch_features(images, encoder)
    split = np.full(240, probes.SPLIT_TRAIN, dtype=np.int8)
    split[160:200] = probes.SPLIT_VAL
    split[200:] = probes.SPLIT_TEST
    bank = probes.build_patch_bank(feats, patch_labels, split)
    bank, _ = probes.standardize(bank)

    knn_report = probes.knn_probe(bank)
    print("patch k-NN     selected", knn_report.selected,
          f" val {knn_report.val_metric:.3f}  test {knn_report.test_metric:.3f}")

    model, logreg_report = probes.logreg_probe(bank)
    print("patch logistic selected", logreg_report.selected,
          f" val {logreg_report.val_metric:.3f}  test {logreg_report.test_metric:.3f}")

    test_f, test_l = bank.subset(probes.SPLIT_TEST)
    pred = np.argmax(model.predict_proba(test_f), axis=1)
    miou = probes.mean_iou(pred, test_l, spec.n_classes)
    print(f"patch logistic test mean IoU {miou:.3f}  (chance accuracy 0.25)")

    # --- image-level attentive probe ----------------------------------------
    # single-class images so each image has one label
    cls_spec = workbench.SyntheticSpec(
        patch_size=net_config.patch_size, image_size=32, layout="single"
    )
    images, labels = workbench.generate_synthetic(cls_spec, 160, seed=100)
    tokens = probes.extract_patch_features(images, encoder)
    image_labels = labels[:, 0]
    probe, report = probes.attentive_probe_train(
        tokens[:128], image_labels[:128],
        seed=0, epochs=4, head_width=8,
        lr_grid=(1e-3, 5e-3), wd_grid=(1e-3,),
        test_set=(tokens[128:], image_labels[128:]),
    )
    print("attentive      selected", report.selected,
          f" val {report.val_metric:.3f}  test {report.test_metric:.3f}")


if __name__ == "__main__":
    main()
