"""Mask-trained continual fusion.

At each continual step the previous merged task vector (pre) and the
incoming task vector (post) are combined through a convex rule

    delta_m = alpha * (m_pre . pre) + (1 - alpha) * (m_post . post)

and the two masks are trained by alternating gradient steps on a Sinkhorn
alignment loss between the merged model's features and the pre / post
target models' features: odd epochs update the pre mask against the
previous merged model, even epochs update the post mask against the
incoming task's fine-tuned model. Only the selected mask moves; the
backbone and both task vectors stay frozen throughout. After mask
training the step's merged vector is frozen and the previous task's
classification head is lightly re-tuned on a small labeled subsample.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .metrics import normalized_feature_scale
from .models import Batch, ToyModel, backward, forward_features
from .params import (
    MaskVector,
    ParamVector,
    pv_add,
    pv_hadamard,
    pv_scale,
)
from .sinkhorn import SinkhornConfig, sinkhorn_distance, sinkhorn_grad_features
from .taskgen import subsample_labeled


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.8
    ot_epochs: int = 100
    mask_lr: float = 0.2
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    pre_batch_mixture: bool = True  # pre-side OT batch mixes all seen tasks
    head_epochs: int = 100
    head_lr: float = 0.01
    head_fraction: float = 0.25
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.ot_epochs < 1:
            raise ConfigError("ot_epochs must be >= 1")
        if self.mask_lr <= 0:
            raise ConfigError("mask_lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class MergeState:
    step: int
    merged_task_vector: ParamVector
    mask_pre: MaskVector
    mask_post: MaskVector
    heads: dict[str, ParamVector]
    ot_loss_history: list[tuple[int, str, float]] = field(default_factory=list)


class ResidencyTracker:
    """Counts task-vector-shaped parameter vectors retained across epochs.

    The continual loop registers exactly the long-lived residents (the
    backbone template, the current merged vector, the incoming vector);
    per-epoch temporaries are released within the epoch and never
    accumulate with the number of tasks.
    """

    def __init__(self):
        self._live: set[int] = set()
        self.max_resident = 0

    def acquire(self, v: ParamVector) -> ParamVector:
        self._live.add(id(v))
        self.max_resident = max(self.max_resident, len(self._live))
        return v

    def release(self, v: ParamVector) -> None:
        self._live.discard(id(v))

    @property
    def resident(self) -> int:
        return len(self._live)


class _MaskOptimizer:
    """Adam or plain SGD over one mask's layer arrays."""

    def __init__(self, template: ParamVector, cfg: FusionConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(a) for n, a in template.entries.items()}
        self.v = {n: np.zeros_like(a) for n, a in template.entries.items()}

    def step(self, mask: MaskVector, grad: ParamVector) -> MaskVector:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            return MaskVector(
                {n: mask[n] - cfg.mask_lr * grad[n] for n in mask.layers()}
            )
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        out = {}
        for n in mask.layers():
            self.m[n] = b1 * self.m[n] + (1 - b1) * grad[n]
            self.v[n] = b2 * self.v[n] + (1 - b2) * grad[n] ** 2
            mhat = self.m[n] / (1 - b1**self.t)
            vhat = self.v[n] / (1 - b2**self.t)
            out[n] = mask[n] - cfg.mask_lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        return MaskVector(out)


def masked_fuse(
    pre: ParamVector,
    post: ParamVector,
    m_pre: MaskVector,
    m_post: MaskVector,
    alpha: float,
) -> ParamVector:
    """Convex combination of the masked task vectors."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return pv_add(
        pv_scale(alpha, pv_hadamard(m_pre, pre)),
        pv_scale(1.0 - alpha, pv_hadamard(m_post, post)),
    )


def reconstruct(theta0: ParamVector, delta_m: ParamVector) -> ParamVector:
    """Add the merged task vector back onto the frozen backbone."""
    return pv_add(theta0, delta_m)


def ot_alignment_loss_and_grad(
    merged_model: ToyModel,
    target_model: ToyModel,
    inputs: np.ndarray,
    cfg: SinkhornConfig,
) -> tuple[float, ParamVector]:
    """Sinkhorn alignment loss between merged and target features, plus
    its fixed-plan gradient with respect to the merged backbone.

    Both clouds are scaled to the target's unit-mean-norm convention; the
    scale is treated as a constant of the target, so the chain rule only
    carries the factor through the merged side.
    """
    fm = forward_features(merged_model, inputs)
    ft = forward_features(target_model, inputs)
    s = normalized_feature_scale(ft)
    dist, plan = sinkhorn_distance(s * fm, s * ft, cfg)
    g_feat = s * sinkhorn_grad_features(s * fm, s * ft, plan)
    g_backbone = backward(
        merged_model, None, None, wrt="backbone", feature_grad=g_feat, inputs=inputs
    )
    return dist, g_backbone


def ot_mask_epoch(
    state: MergeState,
    theta0: ParamVector,
    delta_pre: ParamVector,
    delta_post: ParamVector,
    target_model: ToyModel,
    batch_inputs: np.ndarray,
    side: str,
    epoch: int,
    cfg: FusionConfig,
    optimizer: _MaskOptimizer,
) -> MergeState:
    """One alternating mask update. Only the selected side's mask moves."""
    if side not in ("pre", "post"):
        raise ConfigError(f"side must be 'pre' or 'post', got '{side}'")
    fused = masked_fuse(delta_pre, delta_post, state.mask_pre, state.mask_post, cfg.alpha)
    merged_model = target_model.with_backbone(reconstruct(theta0, fused))
    loss, g_backbone = ot_alignment_loss_and_grad(
        merged_model, target_model, batch_inputs, cfg.sinkhorn
    )
    if side == "pre":
        g_mask = pv_scale(cfg.alpha, pv_hadamard(delta_pre, g_backbone))
        new_pre = optimizer.step(state.mask_pre, g_mask)
        new_post = state.mask_post
    else:
        g_mask = pv_scale(1.0 - cfg.alpha, pv_hadamard(delta_post, g_backbone))
        new_pre = state.mask_pre
        new_post = optimizer.step(state.mask_post, g_mask)
    state.ot_loss_history.append((epoch, side, loss))
    return replace(state, mask_pre=new_pre, mask_post=new_post)


def head_finetune(
    merged_model: ToyModel,
    task: str,
    labeled_subset: Batch,
    epochs: int,
    lr: float,
) -> ParamVector:
    """Cross-entropy gradient descent on one head; backbone frozen."""
    if labeled_subset.size == 0:
        raise DataError("empty labeled subset")
    model = merged_model
    for _ in range(epochs):
        g = backward(model, task, labeled_subset, wrt="head")
        head = model.heads[task]
        model = model.with_head(
            task,
            ParamVector({n: head[n] - lr * g[n] for n in ("weight", "bias")}),
        )
    return model.heads[task]


@dataclass
class StepLog:
    step: int
    incoming_task: str
    ot_loss_history: list[tuple[int, str, float]]
    initial_pair_loss: float
    final_pair_loss: float


def _ot_batch(rng: np.random.Generator, pool: np.ndarray, size: int) -> np.ndarray:
    if pool.shape[0] <= size:
        return pool.copy()
    idx = rng.choice(pool.shape[0], size=size, replace=False)
    return pool[np.sort(idx)]


def continual_merge(
    theta0_model: ToyModel,
    task_vectors: Sequence[ParamVector] | Callable[[int], ParamVector],
    task_heads: Sequence[ParamVector],
    task_train_batches: Sequence[Batch],
    task_unlabeled: Sequence[np.ndarray],
    cfg: FusionConfig,
    seed: int = 0,
    tracker: ResidencyTracker | None = None,
    on_step: Callable[[int, ParamVector, dict[str, ParamVector]], None] | None = None,
) -> tuple[ParamVector, MergeState, list[StepLog]]:
    """Stream the task vectors through alternating OT mask training.

    task_vectors may be a callable index -> vector so only the current
    merged vector and the incoming vector are ever materialized. on_step,
    if given, receives (step, merged parameters, heads) after each step.
    Returns the final merged parameters, the end state, and per-step logs.
    """
    if callable(task_vectors):
        load, T = task_vectors, len(task_heads)
    else:
        vecs = list(task_vectors)
        load, T = (lambda i: vecs[i]), len(vecs)
    if T < 2:
        raise DataError("continual merging needs at least 2 task vectors")
    if not (len(task_heads) == len(task_train_batches) == len(task_unlabeled) == T):
        raise DataError("per-task inputs must all have length T")

    tracker = tracker or ResidencyTracker()
    rng = np.random.default_rng(seed)
    theta0 = tracker.acquire(theta0_model.backbone)
    task_ids = [f"task{t + 1:02d}" for t in range(T)]

    merged = tracker.acquire(load(0))
    state = MergeState(
        step=1,
        merged_task_vector=merged,
        mask_pre=MaskVector.ones_like(merged),
        mask_post=MaskVector.ones_like(merged),
        heads={task_ids[0]: task_heads[0]},
    )
    logs: list[StepLog] = []

    for t in range(2, T + 1):
        incoming = tracker.acquire(load(t - 1))
        state = replace(
            state,
            step=t,
            mask_pre=MaskVector.ones_like(merged),
            mask_post=MaskVector.ones_like(merged),
        )
        state.heads[task_ids[t - 1]] = task_heads[t - 1]

        pre_target = theta0_model.with_backbone(reconstruct(theta0, merged))
        post_target = theta0_model.with_backbone(reconstruct(theta0, incoming))

        if cfg.pre_batch_mixture:
            pre_pool = np.concatenate(task_unlabeled[: t - 1])
        else:
            pre_pool = task_unlabeled[t - 2]
        pre_batch = _ot_batch(rng, pre_pool, cfg.batch_size)
        post_batch = _ot_batch(rng, task_unlabeled[t - 1], cfg.batch_size)

        opt_pre = _MaskOptimizer(state.mask_pre, cfg)
        opt_post = _MaskOptimizer(state.mask_post, cfg)

        def _pair_loss(st: MergeState) -> float:
            fused = masked_fuse(merged, incoming, st.mask_pre, st.mask_post, cfg.alpha)
            mm = theta0_model.with_backbone(reconstruct(theta0, fused))
            lp, _ = ot_alignment_loss_and_grad(mm, pre_target, pre_batch, cfg.sinkhorn)
            lq, _ = ot_alignment_loss_and_grad(mm, post_target, post_batch, cfg.sinkhorn)
            return lp + lq

        initial_pair_loss = _pair_loss(state)
        history_start = len(state.ot_loss_history)
        for e in range(1, cfg.ot_epochs + 1):
            if e % 2 == 1:
                state = ot_mask_epoch(
                    state, theta0, merged, incoming, pre_target, pre_batch,
                    "pre", e, cfg, opt_pre,
                )
            else:
                state = ot_mask_epoch(
                    state, theta0, merged, incoming, post_target, post_batch,
                    "post", e, cfg, opt_post,
                )

        final_pair_loss = _pair_loss(state)

        new_merged = masked_fuse(
            merged, incoming, state.mask_pre, state.mask_post, cfg.alpha
        )
        tracker.release(merged)
        tracker.release(incoming)
        merged = tracker.acquire(new_merged)
        state = replace(state, merged_task_vector=merged)

        # light re-tune of the pre task's head on a labeled subsample
        prev_task = task_ids[t - 2]
        merged_model = ToyModel(
            spec=theta0_model.spec,
            backbone=reconstruct(theta0, merged),
            heads=dict(state.heads),
        )
        subset = subsample_labeled(
            task_train_batches[t - 2], cfg.head_fraction, seed=seed + t
        )
        state.heads[prev_task] = head_finetune(
            merged_model, prev_task, subset, cfg.head_epochs, cfg.head_lr
        )

        if on_step is not None:
            on_step(t, reconstruct(theta0, merged), dict(state.heads))

        logs.append(
            StepLog(
                step=t,
                incoming_task=task_ids[t - 1],
                ot_loss_history=state.ot_loss_history[history_start:],
                initial_pair_loss=initial_pair_loss,
                final_pair_loss=final_pair_loss,
            )
        )

    final_theta = reconstruct(theta0, merged)
    return final_theta, state, logs
