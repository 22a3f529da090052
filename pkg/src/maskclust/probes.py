"""Frozen-feature evaluation.

Everything here treats the pretrained model as fixed: patch features go
into banks, banks feed an attentive classification probe, k-NN and
logistic-regression patch probes (segmentation reduced to per-patch
classification), predictor pooling builds global image vectors, and PCA
maps render the feature lattice as RGB.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import network, nn, trainer
from .rng import substream

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2

ATTENTIVE_LR_GRID = (1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2)
ATTENTIVE_WD_GRID = (5e-4, 1e-3, 5e-2)
LOGREG_C_GRID = tuple(np.logspace(-6, 5, 8))


@dataclass
class FeatureBank:
    """Flat feature rows with labels, split tags, and provenance.

    provenance rows are (image index, flat patch position); -1 marks
    fields that do not apply (e.g. image-level features).
    """

    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    provenance: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int8)
        if self.provenance is None:
            self.provenance = np.full((len(self.features), 2), -1, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=np.int64)
        n = len(self.features)
        if not (len(self.labels) == len(self.split) == len(self.provenance) == n):
            raise ValueError("feature, label, split and provenance counts must match")
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if np.isnan(self.features).any():
            raise ValueError("feature bank contains NaN entries")

    def subset(self, split_code: int):
        sel = self.split == split_code
        return self.features[sel], self.labels[sel]

    def __len__(self):
        return len(self.features)


def save_bank(path, bank: FeatureBank) -> None:
    np.savez(
        path,
        features=bank.features,
        labels=bank.labels,
        split=bank.split,
        provenance=bank.provenance,
    )


def load_bank(path) -> FeatureBank:
    with np.load(path) as z:
        return FeatureBank(z["features"], z["labels"], z["split"], z["provenance"])


@dataclass
class ProbeReport:
    """Hyperparameter sweep record: all grid points, the winner, metrics."""

    grid: list[dict]
    selected: dict
    val_metric: float
    test_metric: float | None = None
    extras: dict = field(default_factory=dict)


def select_best(entries: list[dict]) -> int:
    """Index of the entry with the highest val_metric, first on ties."""
    if not entries:
        raise ValueError("empty grid")
    best = 0
    for i, e in enumerate(entries[1:], start=1):
        if e["val_metric"] > entries[best]["val_metric"]:
            best = i
    return best


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels))


# -- attentive probe -----------------------------------------------------------


class AttentiveProbe(nn.Module):
    """Single-query multi-head attention pooling plus a linear classifier.

    One learned query attends over an image's patch tokens (learned key
    and value projections with biases, no residual); the pooled vector is
    mapped to class logits by a bias-free linear layer. Parameter count is
    exactly 2 d^2 + (3 + c) d when head_width divides d.
    """

    def __init__(self, d: int, c: int, rng: np.random.Generator, head_width: int = 64):
        if c < 2:
            raise ValueError("need at least 2 classes")
        if d % head_width != 0:
            raise ValueError(
                f"dim {d} not divisible by head width {head_width}; "
                "pass an explicit head_width that divides it"
            )
        self.query = nn.Param(nn.trunc_normal((d,), rng))
        self.wk = nn.Param(nn.xavier_uniform((d, d), rng))
        self.bk = nn.Param(np.zeros(d))
        self.wv = nn.Param(nn.xavier_uniform((d, d), rng))
        self.bv = nn.Param(np.zeros(d))
        self.classifier = nn.Param(nn.xavier_uniform((d, c), rng))
        self._heads = d // head_width
        self._hw = head_width

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(B, n, d) patch tokens -> (B, c) logits."""
        b, n, d = x.shape
        h, hw = self._heads, self._hw
        k = (x @ self.wk.value + self.bk.value).reshape(b, n, h, hw).transpose(0, 2, 1, 3)
        v = (x @ self.wv.value + self.bv.value).reshape(b, n, h, hw).transpose(0, 2, 1, 3)
        q = self.query.value.reshape(h, hw)
        scores = np.einsum("hc,bhnc->bhn", q, k) / np.sqrt(hw)
        attn = nn.softmax(scores)
        pooled = np.einsum("bhn,bhnc->bhc", attn, v)
        logits = pooled.reshape(b, d) @ self.classifier.value
        self._cache = (x, k, v, attn, pooled)
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        x, k, v, attn, pooled = self._cache
        b, n, d = x.shape
        h, hw = self._heads, self._hw
        self.classifier.grad += pooled.reshape(b, d).T @ dlogits
        dpooled = (dlogits @ self.classifier.value.T).reshape(b, h, hw)
        dattn = np.einsum("bhc,bhnc->bhn", dpooled, v)
        dv = attn[..., None] * dpooled[:, :, None, :]
        dscores = nn.softmax_backward(attn, dattn) / np.sqrt(hw)
        self.query.grad += np.einsum("bhn,bhnc->hc", dscores, k).reshape(-1)
        dk = dscores[..., None] * self.query.value.reshape(1, h, 1, hw)
        dk_flat = dk.transpose(0, 2, 1, 3).reshape(b * n, d)
        dv_flat = dv.transpose(0, 2, 1, 3).reshape(b * n, d)
        x_flat = x.reshape(b * n, d)
        self.wk.grad += x_flat.T @ dk_flat
        self.bk.grad += dk_flat.sum(axis=0)
        self.wv.grad += x_flat.T @ dv_flat
        self.bv.grad += dv_flat.sum(axis=0)


def attentive_probe_param_count(d: int, c: int) -> int:
    """Closed form for the probe size: 2 d^2 + (3 + c) d."""
    return 2 * d * d + (3 + c) * d


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    probs = nn.softmax(logits)
    b = len(labels)
    picked = probs[np.arange(b), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-12))))
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    return loss, dlogits / b


def attentive_probe_train(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    epochs: int = 10,
    batch_size: int = 64,
    lr_grid=ATTENTIVE_LR_GRID,
    wd_grid=ATTENTIVE_WD_GRID,
    val_fraction: float = 0.1,
    head_width: int = 64,
    test_set: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[AttentiveProbe, ProbeReport]:
    """Sweep (lr, wd), each trained with AdamW on 90% of the data and
    scored on the held-out 10%; returns the winning probe.

    features: (images, patches, d); labels: (images,) with every class in
    0..c-1 represented at least once.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_img, _, d = features.shape
    c = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=c)
    if c < 2 or np.any(counts == 0):
        raise ValueError("every class must appear at least once")

    perm = substream(seed, "attentive-split").permutation(n_img)
    n_val = max(1, int(round(val_fraction * n_img)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("not enough images to hold out a validation split")

    entries = []
    best_probe = None
    best_idx = -1
    for gi, (lr, wd) in enumerate(itertools.product(lr_grid, wd_grid)):
        probe = AttentiveProbe(d, c, substream(seed, "attentive-init", gi), head_width)
        opt = trainer.AdamW(
            [{"params": list(probe.named_params())}], weight_decay=wd
        )
        steps_per_epoch = int(np.ceil(len(train_idx) / batch_size))
        sched = trainer.Schedule(
            total_steps=epochs * steps_per_epoch,
            peak_lr=lr,
            warmup_fraction=0.1,
            cosine_truncation=0.0,
        )
        step = 0
        for epoch in range(epochs):
            order = substream(seed, "attentive-shuffle", gi, epoch).permutation(train_idx)
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                step += 1
                probe.zero_grad()
                _, dlogits = cross_entropy(probe.forward(features[idx]), labels[idx])
                probe.backward(dlogits)
                opt.step(trainer.lr_at(step, sched))
        val_acc = accuracy(
            np.argmax(probe.forward(features[val_idx]), axis=1), labels[val_idx]
        )
        entries.append({"params": {"lr": lr, "wd": wd}, "val_metric": val_acc})
        if best_idx < 0 or val_acc > entries[best_idx]["val_metric"]:
            best_idx, best_probe = gi, probe

    chosen = select_best(entries)
    assert chosen == best_idx
    test_metric = None
    if test_set is not None:
        tf, tl = test_set
        test_metric = accuracy(np.argmax(best_probe.forward(tf), axis=1), tl)
    report = ProbeReport(
        grid=entries,
        selected=entries[chosen]["params"],
        val_metric=entries[chosen]["val_metric"],
        test_metric=test_metric,
    )
    return best_probe, report


# -- k-NN ----------------------------------------------------------------------


def _pairwise_distances(queries, bank, metric):
    if metric == "l2":
        # squared distances preserve the ordering and the tie structure
        qq = np.sum(queries**2, axis=1, keepdims=True)
        bb = np.sum(bank**2, axis=1)
        return np.maximum(qq + bb - 2.0 * queries @ bank.T, 0.0)
    if metric == "cosine":
        qn = np.linalg.norm(queries, axis=1, keepdims=True)
        bn = np.linalg.norm(bank, axis=1, keepdims=True)
        if np.any(qn == 0) or np.any(bn == 0):
            raise ValueError("cosine distance undefined for zero-norm rows")
        return 1.0 - (queries / qn) @ (bank / bn).T
    raise ValueError(f"unknown metric {metric!r}")


def knn_predict(
    bank_features: np.ndarray,
    bank_labels: np.ndarray,
    queries: np.ndarray,
    k: int,
    metric: str = "l2",
) -> np.ndarray:
    """Majority label among the k nearest bank rows.

    Deterministic tie handling: neighbors are ordered by (distance, bank
    index); vote ties go to the label whose nearest tied neighbor is
    closer, then to the lower label index.
    """
    bank_features = np.asarray(bank_features, dtype=np.float64)
    bank_labels = np.asarray(bank_labels, dtype=np.int64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n = len(bank_features)
    if n == 0:
        raise ValueError("empty bank")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    dists = _pairwise_distances(queries, bank_features, metric)
    out = np.empty(len(queries), dtype=np.int64)
    idx = np.arange(n)
    n_labels = int(bank_labels.max()) + 1
    for qi, row in enumerate(dists):
        order = np.lexsort((idx, row))[:k]
        top_labels = bank_labels[order]
        top_d = row[order]
        counts = np.bincount(top_labels, minlength=n_labels)
        winners = np.flatnonzero(counts == counts.max())
        if len(winners) == 1:
            out[qi] = winners[0]
        else:
            # top_d ascending, so the first occurrence is that label's nearest
            out[qi] = min(
                (float(top_d[top_labels == lab][0]), int(lab)) for lab in winners
            )[1]
    return out


def knn_probe(
    bank: FeatureBank,
    k_grid=(1, 3, 10, 30),
    metrics=("l2", "cosine"),
) -> ProbeReport:
    """Grid over (k, metric) on the bank's val split; test split scored
    with the winner."""
    train_f, train_l = bank.subset(SPLIT_TRAIN)
    val_f, val_l = bank.subset(SPLIT_VAL)
    test_f, test_l = bank.subset(SPLIT_TEST)
    if len(train_f) == 0 or len(val_f) == 0:
        raise ValueError("bank needs nonempty train and val splits")
    entries = []
    for k in k_grid:
        for metric in metrics:
            if k > len(train_f):
                continue
            pred = knn_predict(train_f, train_l, val_f, k, metric)
            entries.append(
                {"params": {"k": k, "metric": metric}, "val_metric": accuracy(pred, val_l)}
            )
    best = select_best(entries)
    sel = entries[best]["params"]
    test_metric = None
    if len(test_f):
        pred = knn_predict(train_f, train_l, test_f, sel["k"], sel["metric"])
        test_metric = accuracy(pred, test_l)
    return ProbeReport(entries, sel, entries[best]["val_metric"], test_metric)


# -- logistic regression ---------------------------------------------------------


@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: np.ndarray
    converged: bool

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return nn.softmax(x @ self.weights + self.intercept)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)


def fit_logreg(
    x: np.ndarray, y: np.ndarray, c_reg: float, max_iter: int = 1000, gtol: float = 1e-6
) -> LogisticModel:
    """L2-regularized multinomial logistic regression by L-BFGS.

    Objective 0.5 ||W||^2 + c_reg * sum_i CE_i with an unpenalized
    intercept, so small c_reg forces the weights toward zero while the
    intercept still fits the class priors.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes in the training set")
    n, d = x.shape
    c = int(y.max()) + 1
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    def objective(theta):
        w = theta[: d * c].reshape(d, c)
        b = theta[d * c :]
        logits = x @ w + b
        probs = nn.softmax(logits, axis=1)
        ce = -np.sum(onehot * np.log(np.maximum(probs, 1e-300)))
        f = 0.5 * np.sum(w * w) + c_reg * ce
        delta = probs - onehot
        gw = w + c_reg * (x.T @ delta)
        gb = c_reg * delta.sum(axis=0)
        return f, np.concatenate([gw.reshape(-1), gb])

    theta0 = np.zeros(d * c + c)
    res = minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol},
    )
    return LogisticModel(
        weights=res.x[: d * c].reshape(d, c),
        intercept=res.x[d * c :],
        converged=bool(res.success),
    )


def logreg_probe(
    bank: FeatureBank,
    c_grid=LOGREG_C_GRID,
    max_iter: int = 1000,
) -> tuple[LogisticModel, ProbeReport]:
    """Grid over the regularization strength on the bank's val split, then
    refit the winner on train+val; non-convergence is reported, not fatal."""
    train_f, train_l = bank.subset(SPLIT_TRAIN)
    val_f, val_l = bank.subset(SPLIT_VAL)
    test_f, test_l = bank.subset(SPLIT_TEST)
    if len(train_f) == 0 or len(val_f) == 0:
        raise ValueError("bank needs nonempty train and val splits")
    entries = []
    flags = []
    for c_reg in c_grid:
        model = fit_logreg(train_f, train_l, c_reg, max_iter)
        entries.append(
            {
                "params": {"C": float(c_reg)},
                "val_metric": accuracy(model.predict(val_f), val_l),
            }
        )
        flags.append(model.converged)
    best = select_best(entries)
    refit_x = np.concatenate([train_f, val_f])
    refit_y = np.concatenate([train_l, val_l])
    final = fit_logreg(refit_x, refit_y, entries[best]["params"]["C"], max_iter)
    test_metric = accuracy(final.predict(test_f), test_l) if len(test_f) else None
    report = ProbeReport(
        entries,
        entries[best]["params"],
        entries[best]["val_metric"],
        test_metric,
        extras={"grid_converged": flags, "final_converged": final.converged},
    )
    return final, report


# -- standardization -------------------------------------------------------------


def standardize(bank: FeatureBank) -> tuple[FeatureBank, dict]:
    """Center and scale every dimension by train-split statistics.

    The same (mean, std) transform every split; stds below 1e-8 are
    floored, which zeroes constant columns instead of exploding them.
    """
    train = bank.features[bank.split == SPLIT_TRAIN]
    if len(train) == 0:
        raise ValueError("standardization requires a nonempty train split")
    mean = train.mean(axis=0)
    raw_std = train.std(axis=0)
    std = np.maximum(raw_std, 1e-8)
    transformed = (bank.features - mean) / std
    transformed[:, raw_std < 1e-8] = 0.0  # constant columns carry no signal
    out = FeatureBank(transformed, bank.labels, bank.split, bank.provenance)
    return out, {"mean": mean, "std": std}


# -- predictor pooling and PCA maps ------------------------------------------------


def predictor_pooling(
    images: np.ndarray, encoder: network.Encoder, predictor: network.Predictor
) -> np.ndarray:
    """Global image vectors from the predictor's first attention layer.

    The full unmasked image is encoded, one mask query is placed at every
    patch position, the queries run through only the first cross-attention
    sublayer (residual stream state, MLP excluded), and the per-position
    outputs are average-pooled.
    """
    images = np.asarray(images, dtype=np.float64)
    tokens, coords = encoder.embed_batch(images)
    z = encoder.forward_batch(tokens, coords, train=False)
    b, n, _ = tokens.shape
    n_reg = encoder.config.n_reg
    ctx_coords = np.concatenate([coords, np.zeros((b, n_reg, 2))], axis=1)
    ctx_on = np.concatenate([np.ones((b, n), bool), np.zeros((b, n_reg), bool)], axis=1)
    states = predictor.first_attention_states(coords, z, ctx_coords, ctx_on)
    return states.mean(axis=1)


def pca_components(x: np.ndarray, n_components: int = 3):
    """Centered PCA scores and directions via SVD; returns (scores,
    directions, rank)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 1:
        raise ValueError("empty feature matrix")
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = (s[0] * max(centered.shape) * np.finfo(np.float64).eps) if s.size else 0.0
    rank = int(np.sum(s > tol))
    take = min(n_components, vt.shape[0])
    return centered @ vt[:take].T, vt[:take], rank


def pca_feature_map(
    patch_features: np.ndarray, lattice: tuple[int, int], per_image: bool = True
) -> np.ndarray:
    """Render (B, n, d) patch features as (B, rows, cols, 3) RGB in [0, 1].

    The first three principal components map to channels, min-max rescaled
    per channel; components beyond the feature rank come out flat 0.5.
    """
    feats = np.asarray(patch_features, dtype=np.float64)
    b, n, d = feats.shape
    rows, cols = lattice
    if rows * cols != n:
        raise ValueError("lattice does not match the patch count")
    if b * n < 3:
        raise ValueError("need at least 3 patch tokens")
    out = np.full((b, n, 3), 0.5)

    def fill(target, scores, rank):
        for ch in range(min(3, rank)):
            col = scores[:, ch]
            lo, hi = col.min(), col.max()
            target[:, ch] = 0.5 if hi - lo == 0 else (col - lo) / (hi - lo)

    if per_image:
        for i in range(b):
            scores, _, rank = pca_components(feats[i], 3)
            fill(out[i], scores, rank)
    else:
        scores, _, rank = pca_components(feats.reshape(b * n, d), 3)
        flat = out.reshape(b * n, 3)
        fill(flat, scores, rank)
        out = flat.reshape(b, n, 3)
    return out.reshape(b, rows, cols, 3)


def mean_iou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> float:
    """Mean intersection-over-union across classes present in either map."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth sizes differ")
    ious = []
    for cls in range(n_classes):
        p = pred == cls
        g = gt == cls
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    if not ious:
        raise ValueError("no class present in either map")
    return float(np.mean(ious))


# -- feature extraction -------------------------------------------------------------


def extract_patch_features(images: np.ndarray, encoder: network.Encoder) -> np.ndarray:
    """(B, H, W, 3) -> (B, n, d) encoder patch outputs, registers dropped."""
    images = np.asarray(images, dtype=np.float64)
    tokens, coords = encoder.embed_batch(images)
    z = encoder.forward_batch(tokens, coords, train=False)
    return z[:, : tokens.shape[1]]


def build_patch_bank(
    features: np.ndarray, patch_labels: np.ndarray, split: np.ndarray
) -> FeatureBank:
    """Flatten (B, n, d) features and (B, n) labels into a bank; split is
    per image and provenance records (image, position)."""
    b, n, d = features.shape
    if patch_labels.shape != (b, n):
        raise ValueError("patch labels must be (images, patches)")
    if np.asarray(split).shape != (b,):
        raise ValueError("split tags are per image")
    prov = np.stack(
        [np.repeat(np.arange(b), n), np.tile(np.arange(n), b)], axis=1
    ).astype(np.int64)
    return FeatureBank(
        features.reshape(b * n, d),
        patch_labels.reshape(-1),
        np.repeat(np.asarray(split, dtype=np.int8), n),
        prov,
    )
