"""Calibration harness: checks the empirical properties the default
configuration is expected to satisfy (specialist/pretrained separation,
shift halving, merging-method ordering, alpha-sweep shape) across seeds.

Run from the repo root: python scripts/calibrate.py [--seeds 5]
"""

import argparse
import time

import numpy as np

from otmf import (
    AccuracyMatrix,
    FusionConfig,
    TaskStreamSpec,
    accuracy,
    bwt,
    continual_merge,
    continual_swa,
    continual_task_arithmetic,
    continual_ties,
    generate_stream,
    reconstruct,
)
from otmf.models import ModelSpec, ToyModel, init_model, task_vector, train_sft

SFT_EPOCHS = 300
SFT_LR = 0.1
MODEL = ModelSpec((8, 16, 8))


def build_world(seed):
    stream = TaskStreamSpec(seed=seed)
    pretrain, tasks = generate_stream(stream)
    base = init_model(MODEL, seed=seed)
    theta0 = train_sft(MODEL, base, "pretrain", pretrain, stream.classes_per_task,
                       SFT_EPOCHS, SFT_LR, seed=seed)
    theta0 = ToyModel(spec=MODEL, backbone=theta0.backbone, heads={})
    sfts = []
    for i, td in enumerate(tasks):
        m = train_sft(MODEL, theta0, td.task_id, td.train, stream.classes_per_task,
                      SFT_EPOCHS, SFT_LR, seed=seed + 100 + i)
        sfts.append(m)
    return stream, pretrain, tasks, theta0, sfts


def eval_merged(theta, heads, tasks, theta0):
    model = ToyModel(spec=MODEL, backbone=theta, heads=dict(heads))
    return [accuracy(model, td.task_id, td.test) for td in tasks]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()

    rows = {"otmf": [], "swa": [], "ta": [], "ties": []}
    bwts = {"otmf": [], "ta": []}
    for seed in range(args.seeds):
        t0 = time.time()
        stream, pretrain, tasks, theta0, sfts = build_world(seed)
        # separation check: specialists should beat their heads on theta0
        own = [accuracy(m, td.task_id, td.test) for m, td in zip(sfts, tasks)]
        pre_heads = {td.task_id: m.heads[td.task_id] for m, td in zip(sfts, tasks)}
        pre_model = ToyModel(spec=MODEL, backbone=theta0.backbone, heads=pre_heads)
        pre_acc = [accuracy(pre_model, td.task_id, td.test) for td in tasks]
        print(f"seed {seed}: SFT own-task acc {np.round(own,3)}, pretrained acc {np.round(pre_acc,3)}")

        deltas = [task_vector(m, theta0) for m in sfts]
        heads = {td.task_id: m.heads[td.task_id] for m, td in zip(sfts, tasks)}

        cfg = FusionConfig()
        final_theta, state, logs = continual_merge(
            theta0, deltas, [heads[td.task_id] for td in tasks],
            [td.train for td in tasks], [td.unlabeled for td in tasks],
            cfg, seed=seed)
        accs = eval_merged(final_theta, state.heads, tasks, theta0)
        rows["otmf"].append(np.mean(accs))
        for lg in logs:
            print(f"  step {lg.step}: pair loss {lg.initial_pair_loss:.4f} -> {lg.final_pair_loss:.4f}"
                  f" (ratio {lg.final_pair_loss/lg.initial_pair_loss:.3f})")
        # bwt for otmf: need accuracy matrix; redo stepwise
        # (cheap approximation: rerun merges prefix-wise)
        mat = AccuracyMatrix(len(tasks))
        mat.set(1, 1, accuracy(ToyModel(spec=MODEL, backbone=reconstruct(theta0.backbone, deltas[0]),
                                        heads=heads), tasks[0].task_id, tasks[0].test))
        for tt in range(2, len(tasks) + 1):
            ft, st, _ = continual_merge(
                theta0, deltas[:tt], [heads[td.task_id] for td in tasks[:tt]],
                [td.train for td in tasks[:tt]], [td.unlabeled for td in tasks[:tt]],
                cfg, seed=seed)
            mm = ToyModel(spec=MODEL, backbone=ft, heads=st.heads)
            for i in range(1, tt + 1):
                mat.set(tt, i, accuracy(mm, tasks[i-1].task_id, tasks[i-1].test))
        bwts["otmf"].append(bwt(mat))

        for name, fn in (("swa", lambda: continual_swa(theta0.backbone, deltas)),
                         ("ta", lambda: continual_task_arithmetic(theta0.backbone, deltas, 0.3)),
                         ("ties", lambda: continual_ties(theta0.backbone, deltas, 0.2))):
            merged = reconstruct(theta0.backbone, fn())
            accs_b = eval_merged(merged, heads, tasks, theta0)
            rows[name].append(np.mean(accs_b))
        # ta bwt
        matta = AccuracyMatrix(len(tasks))
        matta.set(1, 1, accuracy(ToyModel(spec=MODEL, backbone=reconstruct(theta0.backbone, deltas[0]),
                                          heads=heads), tasks[0].task_id, tasks[0].test))
        for tt in range(2, len(tasks) + 1):
            merged = reconstruct(theta0.backbone, continual_task_arithmetic(theta0.backbone, deltas[:tt], 0.3))
            mm = ToyModel(spec=MODEL, backbone=merged, heads=heads)
            for i in range(1, tt + 1):
                matta.set(tt, i, accuracy(mm, tasks[i-1].task_id, tasks[i-1].test))
        bwts["ta"].append(bwt(matta))
        print(f"seed {seed}: otmf {rows['otmf'][-1]:.3f} swa {rows['swa'][-1]:.3f} "
              f"ta {rows['ta'][-1]:.3f} ties {rows['ties'][-1]:.3f} "
              f"bwt otmf {bwts['otmf'][-1]:+.3f} ta {bwts['ta'][-1]:+.3f} "
              f"[{time.time()-t0:.1f}s]")

    print("\nmeans:", {k: round(float(np.mean(v)), 4) for k, v in rows.items()})
    print("bwt means:", {k: round(float(np.mean(v)), 4) for k, v in bwts.items()})


if __name__ == "__main__":
    main()
