"""Training orchestration: schedule, dual optimizers, the step, checkpoints.

One training step runs the teacher on the full view to produce balanced
cluster targets, runs the student on the surviving patches, predicts the
assignments at a handful of masked positions, and applies two decoupled
AdamW optimizers over disjoint parameter sets: the network learns from the
masked-prediction loss, the prototypes from the clustering loss. The
teacher then takes an EMA step with momentum 1 - lr.

All randomness is drawn from per-step named substreams of the run seed,
so resuming from a checkpoint at step t reproduces steps t+1.. bit for
bit without replaying the prefix.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import network, nn, objective
from .masking import LatticeShape, MaskSpec, generate_mask, sample_prediction_targets
from .rng import substream


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    peak_lr: float
    warmup_fraction: float = 0.10
    cosine_truncation: float = 0.20
    final_lr_floor: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if not 0.0 <= self.cosine_truncation < 1.0:
            raise ValueError("cosine_truncation must lie in [0, 1)")
        if not 0.0 <= self.final_lr_floor <= self.peak_lr:
            raise ValueError("final_lr_floor must lie in [0, peak_lr]")


def lr_at(step: float, schedule: Schedule) -> float:
    """Learning rate at a step: linear ramp to the peak over the warmup
    span, then a cosine that training truncates before its half-period
    ends (the run stops when the cosine is `1 - cosine_truncation` of the
    way through, so the rate never reaches the floor)."""
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    t_warm = s.warmup_fraction * s.total_steps
    if step < t_warm:
        return s.peak_lr * step / t_warm
    u = (1.0 - s.cosine_truncation) * (step - t_warm) / (s.total_steps - t_warm)
    return s.final_lr_floor + 0.5 * (s.peak_lr - s.final_lr_floor) * (1.0 + np.cos(np.pi * u))


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.95)
    clustering_lr_ratio: float = 0.5
    patch_embed_lr_ratio: float = 0.2
    norm_wd_ratio: float = 0.1
    mask: MaskSpec = field(default_factory=lambda: MaskSpec("inverse_block_roll", 0.65))
    n_pred: int = 7
    crop_scale: tuple[float, float] = (0.6, 1.0)
    hflip: bool = True
    sk_mode: str = "positionwise"
    mi_window: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr", "clustering_lr_ratio", "patch_embed_lr_ratio", "norm_wd_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if self.n_pred < 1:
            raise ValueError("n_pred must be >= 1")
        if self.sk_mode not in ("positionwise", "standard"):
            raise ValueError("sk_mode must be 'positionwise' or 'standard'")
        if self.mi_window < 1:
            raise ValueError("mi_window must be >= 1")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; carries the diagnostic dump."""

    def __init__(self, step, mim, cluster, max_abs_logit):
        self.diagnostics = {
            "step": step,
            "mim_loss": mim,
            "cluster_loss": cluster,
            "max_abs_logit": max_abs_logit,
        }
        super().__init__(f"non-finite loss at step {step}: {self.diagnostics}")


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    Each group carries an lr multiplier and a weight-decay multiplier;
    moment tensors are keyed by parameter name so optimizer state can be
    checkpointed and restored exactly.
    """

    def __init__(self, groups, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}
        seen = set()
        for g in groups:
            for name, p in g["params"]:
                if name in seen:
                    raise ValueError(f"parameter {name} appears in two groups")
                seen.add(name)
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for g in self.groups:
            glr = lr * g.get("lr_scale", 1.0)
            gwd = self.weight_decay * g.get("wd_scale", 1.0)
            for name, p in g["params"]:
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * np.square(p.grad)
                p.value -= glr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps) + gwd * p.value)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t, dtype=np.int64)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays) -> None:
        self.t = int(arrays["t"])
        for name in self.m:
            self.m[name][...] = arrays[f"m.{name}"]
            self.v[name][...] = arrays[f"v.{name}"]


def network_param_groups(named_params, config: TrainConfig):
    """Split network parameters into (patch embedding, norm gains, rest).

    The patch embedding trains at a reduced rate and norm gains see
    reduced weight decay, per the pretraining recipe.
    """
    embed, norms, rest = [], [], []
    for name, p in named_params:
        if name.startswith("encoder.patch_embed."):
            embed.append((name, p))
        elif name.endswith(".gain"):
            norms.append((name, p))
        else:
            rest.append((name, p))
    return [
        {"params": rest, "lr_scale": 1.0, "wd_scale": 1.0},
        {"params": embed, "lr_scale": config.patch_embed_lr_ratio, "wd_scale": 1.0},
        {"params": norms, "lr_scale": 1.0, "wd_scale": config.norm_wd_ratio},
    ]


@dataclass
class TrainState:
    encoder: network.Encoder
    predictor: network.Predictor
    student_head: nn.Linear
    teacher: network.Encoder
    head: objective.ClusterHead
    opt_net: AdamW
    opt_cent: AdamW
    step: int
    seed: int
    # sliding window of per-step (position x cluster) hard-target counts
    mi_counts: np.ndarray | None = None
    mi_filled: int = 0
    mi_next: int = 0

    def named_network_params(self):
        yield from (("encoder." + n, p) for n, p in self.encoder.named_params())
        yield from (("predictor." + n, p) for n, p in self.predictor.named_params())
        yield from (("student_head." + n, p) for n, p in self.student_head.named_params())

    def named_all_params(self):
        yield from self.named_network_params()
        yield from (("teacher." + n, p) for n, p in self.teacher.named_params())
        yield from (("head." + n, p) for n, p in self.head.named_params())


def init_state(
    net_config: network.NetworkConfig,
    train_config: TrainConfig,
    seed: int,
    n_prototypes: int = 64,
    tau_student: float = 0.12,
    tau_teacher: float = 0.06,
    sk_iters: int = 3,
) -> TrainState:
    """Fresh training state; the teacher starts as a copy of the student."""
    rng = substream(seed, "init")
    encoder, predictor = network.build_student(net_config, rng)
    student_head = nn.Linear(net_config.pred_dim, n_prototypes, rng)
    teacher = network.Encoder(net_config, substream(seed, "init-teacher"))
    network.ema_update(teacher, encoder, momentum=0.0)
    head = objective.ClusterHead(
        n_prototypes,
        net_config.enc_dim,
        substream(seed, "init-centroids"),
        tau_student=tau_student,
        tau_teacher=tau_teacher,
        sk_iters=sk_iters,
    )
    state = TrainState(
        encoder=encoder,
        predictor=predictor,
        student_head=student_head,
        teacher=teacher,
        head=head,
        opt_net=None,
        opt_cent=None,
        step=0,
        seed=seed,
    )
    state.opt_net = AdamW(
        network_param_groups(state.named_network_params(), train_config),
        betas=train_config.adam_betas,
        weight_decay=train_config.weight_decay,
    )
    state.opt_cent = AdamW(
        [{"params": [("head.centroids", head.centroids)]}],
        betas=train_config.adam_betas,
        weight_decay=train_config.weight_decay,
    )
    return state


def _update_mi_window(state: TrainState, hard: np.ndarray, n_positions: int, config):
    p = state.head.prototype_count
    if state.mi_counts is None:
        state.mi_counts = np.zeros((config.mi_window, n_positions, p), dtype=np.int64)
    flat = (np.tile(np.arange(n_positions), len(hard)) * p + hard.reshape(-1)).astype(np.int64)
    table = np.bincount(flat, minlength=n_positions * p).reshape(n_positions, p)
    state.mi_counts[state.mi_next] = table
    state.mi_next = (state.mi_next + 1) % config.mi_window
    state.mi_filled = min(state.mi_filled + 1, config.mi_window)
    window = state.mi_counts if state.mi_filled == config.mi_window else state.mi_counts[: state.mi_filled]
    return objective.mi_from_counts(window.sum(axis=0))


def train_step(
    state: TrainState,
    images: np.ndarray,
    config: TrainConfig,
    schedule: Schedule,
    audit: bool = True,
) -> dict:
    """One full optimization step; returns the metrics record.

    ``audit`` verifies the disjoint-gradient contract on the fly: the
    masked-prediction loss must leave prototypes and teacher untouched
    (exact zeros, checked between the two backward passes).
    """
    if state.step >= schedule.total_steps:
        raise ValueError("state already ran the full schedule")
    images = np.asarray(images, dtype=np.float64)
    b = images.shape[0]
    ps = state.encoder.config.patch_size
    rows, cols = images.shape[1] // ps, images.shape[2] // ps
    n = rows * cols
    n_reg = state.encoder.config.n_reg
    p = state.head.prototype_count
    step_next = state.step + 1
    lr = lr_at(step_next, schedule)

    # (1) teacher targets, gradient-free: full view, eval mode, patches only
    t_tokens, t_coords = state.teacher.embed_batch(images)
    t_out = state.teacher.forward_batch(t_tokens, t_coords, train=False)
    feats = t_out[:, :n].reshape(b * n, -1)
    logits = objective.compute_logits(feats, state.head).reshape(b, n, p)
    if config.sk_mode == "positionwise":
        targets = objective.sinkhorn_positionwise(
            logits, state.head.tau_teacher, state.head.sk_iters
        )
    else:
        flat = objective.sinkhorn_standard(
            logits.reshape(b * n, p), state.head.tau_teacher, state.head.sk_iters
        )
        targets = objective.Assignments(flat.probs, grouping=np.tile(np.arange(n), b))
    a_prime = targets.probs.reshape(b, n, p)

    # (2) masks, student encode, prediction queries
    mask_rng = substream(state.seed, "mask", step_next)
    tgt_rng = substream(state.seed, "targets", step_next)
    dp_rng = substream(state.seed, "droppath", step_next)
    lattice = LatticeShape(rows, cols)
    masks = [generate_mask(lattice, config.mask, mask_rng) for _ in range(b)]
    kept_idx = np.stack([np.flatnonzero(~m.grid.reshape(-1)) for m in masks])
    s_tokens, s_coords = state.encoder.embed_batch(images)
    kept_tokens = np.take_along_axis(s_tokens, kept_idx[:, :, None], axis=1)
    kept_coords = np.take_along_axis(s_coords, kept_idx[:, :, None], axis=1)
    z = state.encoder.forward_batch(kept_tokens, kept_coords, train=True, rng=dp_rng)

    query_coords = np.stack(
        [sample_prediction_targets(m, config.n_pred, tgt_rng) for m in masks]
    ).astype(np.float64)
    flat_pos = (query_coords[..., 0] * cols + query_coords[..., 1]).astype(np.int64)
    target_rows = np.take_along_axis(a_prime, flat_pos[:, :, None], axis=1)

    ctx_coords = np.concatenate([kept_coords, np.zeros((b, n_reg, 2))], axis=1)
    ctx_on = np.concatenate(
        [np.ones(kept_coords.shape[:2], bool), np.zeros((b, n_reg), bool)], axis=1
    )
    preds = state.predictor.forward_batch(
        query_coords, z, ctx_coords, ctx_on, train=True, rng=dp_rng
    )

    # (3) masked-prediction loss into the network
    for _, prm in state.named_all_params():
        prm.grad[...] = 0.0
    loss_mim, probs = objective.mim_loss(preds, target_rows, state.student_head, state.head.tau_student)
    dpred = objective.mim_backward(probs, target_rows, state.student_head, state.head.tau_student)
    dctx = state.predictor.backward_batch(dpred)
    dtok_kept = state.encoder.backward_batch(dctx)
    dtok_full = np.zeros_like(s_tokens)
    np.put_along_axis(dtok_full, kept_idx[:, :, None], dtok_kept, axis=1)
    state.encoder.embed_backward(dtok_full)

    if audit:
        if np.any(state.head.centroids.grad != 0.0):
            raise AssertionError("masked-prediction loss leaked gradient into prototypes")
        for name, prm in state.teacher.named_params():
            if np.any(prm.grad != 0.0):
                raise AssertionError(f"teacher parameter {name} received gradient")

    # (4) clustering loss into the prototypes only
    a_soft = objective.soft_assign(logits.reshape(b * n, p), state.head.tau_student)
    loss_cluster = objective.clustering_loss(targets, a_soft)
    state.head.centroids.grad += objective.clustering_grad_centroids(
        feats, a_soft, targets, state.head.tau_student
    )

    if not (np.isfinite(loss_mim) and np.isfinite(loss_cluster)):
        raise TrainingDivergedError(
            step_next, loss_mim, loss_cluster, float(np.abs(logits).max())
        )

    # (5) disjoint optimizer steps, (6) teacher EMA
    state.opt_net.step(lr)
    state.opt_cent.step(lr * config.clustering_lr_ratio)
    momentum = 1.0 - lr
    network.ema_update(state.teacher, state.encoder, momentum)

    # (7) bookkeeping
    hard = np.argmax(a_prime, axis=2)
    position_mi = _update_mi_window(state, hard, n, config)
    state.step = step_next
    return {
        "step": step_next,
        "mim_loss": loss_mim,
        "cluster_loss": loss_cluster,
        "lr": lr,
        "momentum": momentum,
        "target_entropy": objective.mean_entropy(targets),
        "position_mi": position_mi,
    }


# -- checkpoint container ------------------------------------------------------


def _config_blob(net_config, train_config, schedule, state) -> np.ndarray:
    meta = {
        "net": dataclasses.asdict(net_config),
        "train": dataclasses.asdict(train_config),
        "schedule": dataclasses.asdict(schedule),
        "step": state.step,
        "seed": state.seed,
        "n_prototypes": state.head.prototype_count,
        "tau_student": state.head.tau_student,
        "tau_teacher": state.head.tau_teacher,
        "sk_iters": state.head.sk_iters,
        "mi_filled": state.mi_filled,
        "mi_next": state.mi_next,
    }
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)


def save_checkpoint(
    path,
    state: TrainState,
    net_config: network.NetworkConfig,
    train_config: TrainConfig,
    schedule: Schedule,
) -> None:
    """Write the whole training state to one named-array archive.

    The archive is self-describing (configs ride along as a JSON blob), and
    writing the same state twice produces identical bytes.
    """
    arrays = {"meta": _config_blob(net_config, train_config, schedule, state)}
    for name, p in state.named_all_params():
        arrays[f"param.{name}"] = p.value
    for key, arr in state.opt_net.state_arrays().items():
        arrays[f"opt_net.{key}"] = arr
    for key, arr in state.opt_cent.state_arrays().items():
        arrays[f"opt_cent.{key}"] = arr
    arrays["mi_counts"] = (
        state.mi_counts if state.mi_counts is not None else np.zeros((0, 0, 0), np.int64)
    )
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild (state, net_config, train_config, schedule) from an archive."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays["meta"]).decode())
    net_config = network.NetworkConfig(**meta["net"])
    train_kw = dict(meta["train"])
    train_kw["mask"] = MaskSpec(**train_kw["mask"])
    train_kw["adam_betas"] = tuple(train_kw["adam_betas"])
    train_kw["crop_scale"] = tuple(train_kw["crop_scale"])
    train_config = TrainConfig(**train_kw)
    schedule = Schedule(**meta["schedule"])
    state = init_state(
        net_config,
        train_config,
        seed=meta["seed"],
        n_prototypes=meta["n_prototypes"],
        tau_student=meta["tau_student"],
        tau_teacher=meta["tau_teacher"],
        sk_iters=meta["sk_iters"],
    )
    for name, p in state.named_all_params():
        p.value[...] = arrays[f"param.{name}"]
    state.opt_net.load_state_arrays(
        {k[len("opt_net.") :]: v for k, v in arrays.items() if k.startswith("opt_net.")}
    )
    state.opt_cent.load_state_arrays(
        {k[len("opt_cent.") :]: v for k, v in arrays.items() if k.startswith("opt_cent.")}
    )
    state.step = meta["step"]
    state.mi_filled = meta["mi_filled"]
    state.mi_next = meta["mi_next"]
    mi = arrays["mi_counts"]
    state.mi_counts = None if mi.size == 0 else mi.copy()
    return state, net_config, train_config, schedule


def pretrain(
    state: TrainState,
    batch_fn,
    config: TrainConfig,
    schedule: Schedule,
    out_dir,
    net_config: network.NetworkConfig,
    checkpoint_every: int = 0,
    on_metrics=None,
) -> TrainState:
    """Run train_step until the schedule completes.

    batch_fn(step) must return the (B, H, W, 3) pixel batch for that step
    as a pure function of the step index, which is what makes resumed runs
    continue bit-identically. Metrics are appended to metrics.jsonl under
    out_dir; checkpoints go to checkpoint_{step:06d}.npz when
    checkpoint_every > 0, plus checkpoint_final.npz at the end.
    """
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "a") as log:
        while state.step < schedule.total_steps:
            images = np.asarray(batch_fn(state.step))
            if images.ndim != 4 or images.shape[0] < 1:
                raise ValueError("batch_fn must yield a nonempty (B, H, W, 3) batch")
            metrics = train_step(state, images, config, schedule)
            log.write(json.dumps(metrics, sort_keys=True) + "\n")
            log.flush()
            if on_metrics is not None:
                on_metrics(metrics)
            if checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{state.step:06d}.npz"),
                    state, net_config, config, schedule,
                )
    save_checkpoint(
        os.path.join(out_dir, "checkpoint_final.npz"), state, net_config, config, schedule
    )
    return state
