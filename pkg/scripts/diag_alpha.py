"""Diagnostic: alpha sweep average accuracy and final l1 shift vs continual
task arithmetic on the frozen seed-0 stream."""

import numpy as np

from otmf import (
    FusionConfig,
    TaskStreamSpec,
    accuracy,
    continual_merge,
    continual_task_arithmetic,
    generate_stream,
    l1_shift,
    reconstruct,
)
from otmf.models import ModelSpec, ToyModel, init_model, task_vector, train_sft

MODEL = ModelSpec((8, 16, 8))
SEED = 0

stream = TaskStreamSpec(seed=SEED)
pretrain, tasks = generate_stream(stream)
base = init_model(MODEL, seed=SEED)
theta0 = train_sft(MODEL, base, "p", pretrain, stream.classes_per_task, 300, 0.1, SEED)
theta0 = ToyModel(spec=MODEL, backbone=theta0.backbone, heads={})
sfts = [
    train_sft(MODEL, theta0, td.task_id, td.train, stream.classes_per_task, 300, 0.1,
              SEED + 100 + i)
    for i, td in enumerate(tasks)
]
deltas = [task_vector(m, theta0) for m in sfts]
heads = [m.heads[td.task_id] for m, td in zip(sfts, tasks)]

for alpha in [i / 10 for i in range(11)]:
    cfg = FusionConfig(alpha=alpha)
    ft, st, logs = continual_merge(
        theta0, deltas, heads, [td.train for td in tasks],
        [td.unlabeled for td in tasks], cfg, seed=SEED)
    mm = ToyModel(spec=MODEL, backbone=ft, heads=st.heads)
    accs = [accuracy(mm, td.task_id, td.test) for td in tasks]
    print(f"alpha={alpha:.1f} accs={np.round(accs,3)} avg={np.mean(accs):.4f}")

# l1 shift comparison at final step (merged vs own previous-step model and final SFT)
def final_l1(method):
    if method == "otmf":
        cfg = FusionConfig()
        ft_full, _, _ = continual_merge(theta0, deltas, heads, [td.train for td in tasks],
                                        [td.unlabeled for td in tasks], cfg, seed=SEED)
        ft_prev, _, _ = continual_merge(theta0, deltas[:-1], heads[:-1],
                                        [td.train for td in tasks[:-1]],
                                        [td.unlabeled for td in tasks[:-1]], cfg, seed=SEED)
        merged = ToyModel(spec=MODEL, backbone=ft_full, heads={})
        prev = ToyModel(spec=MODEL, backbone=ft_prev, heads={})
    else:
        merged = ToyModel(spec=MODEL, backbone=reconstruct(
            theta0.backbone, continual_task_arithmetic(theta0.backbone, deltas, 0.3)), heads={})
        prev = ToyModel(spec=MODEL, backbone=reconstruct(
            theta0.backbone, continual_task_arithmetic(theta0.backbone, deltas[:-1], 0.3)), heads={})
    pre_inputs = np.concatenate([td.unlabeled for td in tasks[:-1]])
    post_inputs = tasks[-1].unlabeled
    sft_last = sfts[-1]
    return l1_shift(merged, prev, pre_inputs) + l1_shift(merged, sft_last, post_inputs)

print("final l1 total otmf:", final_l1("otmf"))
print("final l1 total ta  :", final_l1("ta"))
