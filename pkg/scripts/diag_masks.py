"""Diagnostic: per-side OT loss trajectories during mask training for one
merge step, across learning rates and stream difficulty settings."""

import numpy as np

from otmf import (
    FusionConfig,
    TaskStreamSpec,
    accuracy,
    continual_merge,
    generate_stream,
)
from otmf.models import ModelSpec, ToyModel, init_model, task_vector, train_sft

MODEL = ModelSpec((8, 16, 8))


def world(seed, het, noiseless=False):
    stream = TaskStreamSpec(seed=seed, heterogeneity=het, num_tasks=2)
    pretrain, tasks = generate_stream(stream)
    base = init_model(MODEL, seed=seed)
    theta0 = train_sft(MODEL, base, "p", pretrain, stream.classes_per_task, 300, 0.1, seed)
    theta0 = ToyModel(spec=MODEL, backbone=theta0.backbone, heads={})
    sfts = [
        train_sft(MODEL, theta0, td.task_id, td.train, stream.classes_per_task,
                  300, 0.1, seed + 100 + i)
        for i, td in enumerate(tasks)
    ]
    return stream, tasks, theta0, sfts


for het in (1.0, 2.0):
    for lr in (0.01, 0.05, 0.2):
        seed = 1
        stream, tasks, theta0, sfts = world(seed, het)
        deltas = [task_vector(m, theta0) for m in sfts]
        heads = [m.heads[td.task_id] for m, td in zip(sfts, tasks)]
        cfg = FusionConfig(mask_lr=lr)
        ft, st, logs = continual_merge(
            theta0, deltas, heads, [td.train for td in tasks],
            [td.unlabeled for td in tasks], cfg, seed=seed)
        lg = logs[0]
        pre = [l for _, s, l in lg.ot_loss_history if s == "pre"]
        post = [l for _, s, l in lg.ot_loss_history if s == "post"]
        print(f"het={het} lr={lr}: pair {lg.initial_pair_loss:.4f} -> {lg.final_pair_loss:.4f} "
              f"ratio {lg.final_pair_loss/lg.initial_pair_loss:.3f}")
        print(f"   pre: {np.round(pre[::10], 4)}")
        print(f"  post: {np.round(post[::10], 4)}")
        mm = ToyModel(spec=MODEL, backbone=ft, heads={td.task_id: h for td, h in zip(tasks, heads)})
        accs = [accuracy(mm, td.task_id, td.test) for td in tasks]
        print(f"  merged accs {np.round(accs, 3)}")
