"""Command-line pipeline: generate data, fine-tune, merge, evaluate.

Subcommands:
    gen           write the synthetic task stream to disk
    train         fine-tune the pretrained backbone and the per-task models
    merge         run a merging method over the task-vector stream
    eval          score a checkpoint and dump feature clouds
    ablate-alpha  full merge per grid point, table of accuracies

All artifacts land under <out>/seed<k>/ so seed sweeps never collide.
Outputs are byte-deterministic for a fixed config + seed; wall-clock
timings go to a separate sidecar so reports stay diffable.

Exit codes: 0 success, 2 config error, 3 data/shape error, 4 numerical
failure. Set OTMF_LOG_LEVEL (DEBUG/INFO/WARNING/ERROR) to control logging.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BaselineConfig, ties_merge_pair
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    OtmfError,
    ShapeMismatchError,
)
from .fusion import FusionConfig, continual_merge, reconstruct
from .io import (
    load_batch,
    load_checkpoint,
    load_matrix,
    save_batch,
    save_checkpoint,
    save_features,
    save_matrix,
    save_report,
)
from .metrics import AccuracyMatrix, accuracy, bwt, l1_shift, sinkhorn_shift
from .models import ModelSpec, ToyModel, forward_features, init_model, train_sft
from .params import ParamVector, pv_sub
from .sinkhorn import SinkhornConfig
from .taskgen import TaskStreamSpec, generate_stream

log = logging.getLogger("otmf")

_MERGE_METHODS = ("otmf", "swa", "task_arithmetic", "ties")


@dataclasses.dataclass(frozen=True)
class SftConfig:
    """Supervised fine-tuning settings shared by the pretrain and task runs."""

    epochs: int = 300
    lr: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("sft epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("sft lr must be > 0")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    stream: TaskStreamSpec = dataclasses.field(default_factory=TaskStreamSpec)
    model: ModelSpec = dataclasses.field(default_factory=lambda: ModelSpec((8, 16, 8)))
    fusion: FusionConfig = dataclasses.field(default_factory=FusionConfig)
    baseline: BaselineConfig = dataclasses.field(default_factory=BaselineConfig)
    sft: SftConfig = dataclasses.field(default_factory=SftConfig)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.model.input_dim != self.stream.input_dim:
            raise ConfigError(
                f"model input dim {self.model.input_dim} != "
                f"stream input dim {self.stream.input_dim}"
            )


def _build_section(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    kwargs = {}
    for key, val in data.items():
        if key == "sinkhorn":
            val = _build_section(SinkhornConfig, val, f"{name}.sinkhorn")
        elif key == "layer_dims":
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section '{name}': {exc}") from exc


def load_config(path: str | None, seed: int | None, out: str | None) -> RunConfig:
    """Parse the config file, apply full defaulting, fold in CLI overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    known = {"stream", "model", "fusion", "baseline", "sft", "seeds", "output_dir"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    cfg = RunConfig(
        stream=_build_section(TaskStreamSpec, data.get("stream", {}), "stream"),
        model=_build_section(ModelSpec, data.get("model", {"layer_dims": (8, 16, 8)}), "model"),
        fusion=_build_section(FusionConfig, data.get("fusion", {}), "fusion"),
        baseline=_build_section(BaselineConfig, data.get("baseline", {}), "baseline"),
        sft=_build_section(SftConfig, data.get("sft", {}), "sft"),
        seeds=tuple(data.get("seeds", (0,))),
        output_dir=data.get("output_dir", "runs/default"),
    )
    if seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(seed,))
    if out is not None:
        cfg = dataclasses.replace(cfg, output_dir=out)
    return cfg


def resolved_config(cfg: RunConfig) -> dict:
    """Every effective value, defaults included, for embedding in reports.

    The output directory is omitted: it locates the artifacts but is not part
    of the experiment definition, and reports must be byte-identical no matter
    where they are written.
    """
    d = dataclasses.asdict(cfg)
    d.pop("output_dir")
    return json.loads(json.dumps(d))


# ---------------------------------------------------------------------------
# per-seed pipeline pieces


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    d = Path(cfg.output_dir) / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _stream_for(cfg: RunConfig, seed: int) -> TaskStreamSpec:
    return dataclasses.replace(cfg.stream, seed=seed)


def _task_ids(cfg: RunConfig) -> list[str]:
    return [f"task{t + 1:02d}" for t in range(cfg.stream.num_tasks)]


def cmd_gen(cfg: RunConfig, seed: int) -> None:
    out = _seed_dir(cfg, seed) / "data"
    out.mkdir(exist_ok=True)
    pretrain, tasks = generate_stream(_stream_for(cfg, seed))
    save_batch(out / "pretrain.csv", pretrain)
    for td in tasks:
        save_batch(out / f"{td.task_id}_train.csv", td.train)
        save_batch(out / f"{td.task_id}_test.csv", td.test)
        cols = [f"x{i}" for i in range(td.unlabeled.shape[1])]
        save_matrix(out / f"{td.task_id}_unlabeled.csv", td.unlabeled, cols)
    log.info("seed %d: wrote %d task datasets to %s", seed, len(tasks), out)


def _load_data(cfg: RunConfig, seed: int):
    data = _seed_dir(cfg, seed) / "data"
    if not (data / "pretrain.csv").exists():
        raise DataError(f"dataset missing under {data}; run `otmf gen` first")
    pretrain = load_batch(data / "pretrain.csv")
    tasks = []
    for tid in _task_ids(cfg):
        train = load_batch(data / f"{tid}_train.csv")
        test = load_batch(data / f"{tid}_test.csv")
        unlabeled, _ = load_matrix(data / f"{tid}_unlabeled.csv")
        tasks.append((tid, train, test, unlabeled))
    return pretrain, tasks


def cmd_train(cfg: RunConfig, seed: int) -> None:
    pretrain, tasks = _load_data(cfg, seed)
    ckpt = _seed_dir(cfg, seed) / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    k = cfg.stream.classes_per_task

    base = init_model(cfg.model, seed=seed)
    pre = train_sft(cfg.model, base, "pretrain", pretrain, k,
                    cfg.sft.epochs, cfg.sft.lr, seed=seed)
    save_checkpoint(ckpt / "pretrained.ckpt", pre)
    theta0 = ToyModel(spec=cfg.model, backbone=pre.backbone, heads={})

    for i, (tid, train, _, _) in enumerate(tasks):
        model = train_sft(cfg.model, theta0, tid, train, k,
                          cfg.sft.epochs, cfg.sft.lr, seed=seed + 100 + i)
        save_checkpoint(ckpt / f"{tid}.ckpt", model)
        log.info("seed %d: trained %s", seed, tid)


def _load_theta0(cfg: RunConfig, seed: int) -> ToyModel:
    path = _seed_dir(cfg, seed) / "checkpoints" / "pretrained.ckpt"
    if not path.exists():
        raise DataError(f"checkpoint missing: {path}; run `otmf train` first")
    pre = load_checkpoint(path)
    return ToyModel(spec=pre.spec, backbone=pre.backbone, heads={})


def _sft_path(cfg: RunConfig, seed: int, tid: str) -> Path:
    path = _seed_dir(cfg, seed) / "checkpoints" / f"{tid}.ckpt"
    if not path.exists():
        raise DataError(f"checkpoint missing: {path}; run `otmf train` first")
    return path


def _merge_otmf(cfg: RunConfig, seed: int, theta0, tasks, step_dir: Path):
    """Mask-trained merge; task checkpoints stream through a loader so at
    most the current merged and incoming vectors are materialized."""
    tids = [t[0] for t in tasks]
    heads, train_batches, pools = [], [], []
    for tid, train, _, unlabeled in tasks:
        sft = load_checkpoint(_sft_path(cfg, seed, tid))
        heads.append(sft.heads[tid])
        train_batches.append(train)
        pools.append(unlabeled)
        del sft

    def loader(i: int) -> ParamVector:
        sft = load_checkpoint(_sft_path(cfg, seed, tids[i]))
        return pv_sub(sft.backbone, theta0.backbone)

    step_logs: dict[int, dict] = {}

    def on_step(step: int, theta: ParamVector, step_heads: dict) -> None:
        model = ToyModel(spec=cfg.model, backbone=theta, heads=step_heads)
        save_checkpoint(step_dir / f"step{step:02d}.ckpt", model)
        step_logs[step] = {"theta": theta, "heads": dict(step_heads)}

    final_theta, state, logs = continual_merge(
        theta0, loader, heads, train_batches, pools, cfg.fusion,
        seed=seed, on_step=on_step,
    )
    final = ToyModel(spec=cfg.model, backbone=final_theta, heads=dict(state.heads))
    extra = {
        "pair_loss": [
            {"step": lg.step, "incoming_task": lg.incoming_task,
             "initial": lg.initial_pair_loss, "final": lg.final_pair_loss}
            for lg in logs
        ],
        "ot_loss_history": [
            [lg.step, e, side, loss]
            for lg in logs
            for e, side, loss in lg.ot_loss_history
        ],
    }
    return final, step_logs, extra


def _merge_baseline(cfg: RunConfig, seed: int, theta0, tasks, step_dir: Path):
    """Streaming baseline fold; one incoming checkpoint resident at a time."""
    method = cfg.baseline.method
    tids = [t[0] for t in tasks]
    heads: dict[str, ParamVector] = {}
    merged: ParamVector | None = None
    acc_sum: ParamVector | None = None
    step_logs: dict[int, dict] = {}

    for t, tid in enumerate(tids, start=1):
        sft = load_checkpoint(_sft_path(cfg, seed, tid))
        heads[tid] = sft.heads[tid]
        delta = pv_sub(sft.backbone, theta0.backbone)
        del sft
        if t == 1:
            merged, acc_sum = delta, delta
        elif method == "swa":
            merged = ParamVector(
                {n: merged[n] + (delta[n] - merged[n]) / t for n in merged.layers()}
            )
        elif method == "task_arithmetic":
            acc_sum = ParamVector({n: acc_sum[n] + delta[n] for n in acc_sum.layers()})
            merged = ParamVector(
                {n: cfg.baseline.scaling * acc_sum[n] for n in acc_sum.layers()}
            )
        else:
            merged = ties_merge_pair(merged, delta, cfg.baseline.trim_fraction)
        if t >= 2:
            theta = reconstruct(theta0.backbone, merged)
            model = ToyModel(spec=cfg.model, backbone=theta, heads=dict(heads))
            save_checkpoint(step_dir / f"step{t:02d}.ckpt", model)
            step_logs[t] = {"theta": theta, "heads": dict(heads)}

    final = ToyModel(
        spec=cfg.model, backbone=reconstruct(theta0.backbone, merged), heads=heads
    )
    return final, step_logs, {}


def cmd_merge(cfg: RunConfig, seed: int, method: str) -> dict:
    if method not in _MERGE_METHODS:
        raise ConfigError(f"unknown merge method '{method}'")
    if method != "otmf" and cfg.baseline.method != method:
        cfg = dataclasses.replace(
            cfg, baseline=dataclasses.replace(cfg.baseline, method=method)
        )
    _, tasks = _load_data(cfg, seed)
    theta0 = _load_theta0(cfg, seed)
    step_dir = _seed_dir(cfg, seed) / "merged" / method
    step_dir.mkdir(parents=True, exist_ok=True)

    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    if method == "otmf":
        final, step_logs, extra = _merge_otmf(cfg, seed, theta0, tasks, step_dir)
    else:
        final, step_logs, extra = _merge_baseline(cfg, seed, theta0, tasks, step_dir)
    timings["merge_seconds"] = time.perf_counter() - t0
    save_checkpoint(step_dir / "final.ckpt", final)

    # accuracy matrix: row 1 is the first fine-tuned model alone
    T = len(tasks)
    mat = AccuracyMatrix(T)
    first = load_checkpoint(_sft_path(cfg, seed, tasks[0][0]))
    mat.set(1, 1, accuracy(first, tasks[0][0], tasks[0][2]))
    for step, entry in sorted(step_logs.items()):
        model = ToyModel(spec=cfg.model, backbone=entry["theta"], heads=entry["heads"])
        for i in range(1, step + 1):
            tid, _, test, _ = tasks[i - 1]
            mat.set(step, i, accuracy(model, tid, test))

    # per-step shift of the merged model against the two models it fused
    shifts = []
    prev = first
    for step, entry in sorted(step_logs.items()):
        tid, _, _, post_pool = tasks[step - 1]
        incoming = load_checkpoint(_sft_path(cfg, seed, tid))
        model = ToyModel(spec=cfg.model, backbone=entry["theta"], heads=entry["heads"])
        pre_pool = np.concatenate([t[3] for t in tasks[: step - 1]])
        shifts.append(
            {
                "step": step,
                "delta_pre": l1_shift(model, prev, pre_pool),
                "delta_post": l1_shift(model, incoming, post_pool),
                "sinkhorn_pre": sinkhorn_shift(model, prev, pre_pool, cfg.fusion.sinkhorn),
                "sinkhorn_post": sinkhorn_shift(model, incoming, post_pool, cfg.fusion.sinkhorn),
            }
        )
        prev = model

    report = {
        "tool_version": __version__,
        "seed": seed,
        "method": method,
        "config": resolved_config(cfg),
        "accuracy_matrix": [
            [None if np.isnan(v) else v for v in row] for row in mat.as_array()
        ],
        "average_accuracy": mat.final_average(),
        "bwt": bwt(mat),
        "shifts": shifts,
        **extra,
    }
    save_report(_seed_dir(cfg, seed) / f"report_{method}.json", report)
    save_report(_seed_dir(cfg, seed) / f"timings_{method}.json", timings)
    log.info(
        "seed %d: %s avg accuracy %.4f bwt %+.4f",
        seed, method, report["average_accuracy"], report["bwt"],
    )
    return report


def cmd_eval(cfg: RunConfig, seed: int, checkpoint: str) -> dict:
    model = load_checkpoint(checkpoint)
    if model.spec != cfg.model:
        raise ShapeMismatchError(
            f"checkpoint spec {model.spec} does not match configured {cfg.model}"
        )
    _, tasks = _load_data(cfg, seed)
    out = _seed_dir(cfg, seed) / "eval"
    out.mkdir(exist_ok=True)

    per_task = []
    for tid, _, test, unlabeled in tasks:
        sft = load_checkpoint(_sft_path(cfg, seed, tid))
        entry = {"task": tid}
        if tid in model.heads:
            entry["accuracy"] = accuracy(model, tid, test)
        entry["delta_l1"] = l1_shift(model, sft, unlabeled)
        entry["delta_sinkhorn"] = sinkhorn_shift(model, sft, unlabeled, cfg.fusion.sinkhorn)
        per_task.append(entry)
        save_features(out / f"features_{tid}_merged.csv",
                      forward_features(model, unlabeled), "merged")
        save_features(out / f"features_{tid}_sft.csv",
                      forward_features(sft, unlabeled), tid)

    # Record the checkpoint relative to the output directory when it lives
    # inside it, so the report does not depend on where the run was written.
    ckpt_path = Path(checkpoint).resolve()
    try:
        ckpt_label = ckpt_path.relative_to(Path(cfg.output_dir).resolve()).as_posix()
    except ValueError:
        ckpt_label = ckpt_path.name
    report = {
        "tool_version": __version__,
        "seed": seed,
        "checkpoint": ckpt_label,
        "config": resolved_config(cfg),
        "per_task": per_task,
    }
    save_report(out / "eval_report.json", report)
    return report


def cmd_ablate_alpha(cfg: RunConfig, seed: int, grid: list[float]) -> dict:
    if not grid:
        raise ConfigError("alpha grid is empty")
    if any(not 0.0 <= a <= 1.0 for a in grid):
        raise ConfigError(f"alpha grid values must lie in [0, 1]: {grid}")
    _, tasks = _load_data(cfg, seed)
    theta0 = _load_theta0(cfg, seed)
    tids = [t[0] for t in tasks]
    heads, train_batches, pools = [], [], []
    deltas = []
    for tid, train, _, unlabeled in tasks:
        sft = load_checkpoint(_sft_path(cfg, seed, tid))
        heads.append(sft.heads[tid])
        deltas.append(pv_sub(sft.backbone, theta0.backbone))
        train_batches.append(train)
        pools.append(unlabeled)

    rows = []
    for alpha in grid:
        fcfg = dataclasses.replace(cfg.fusion, alpha=float(alpha))
        final_theta, state, _ = continual_merge(
            theta0, deltas, heads, train_batches, pools, fcfg, seed=seed
        )
        model = ToyModel(spec=cfg.model, backbone=final_theta, heads=dict(state.heads))
        accs = [accuracy(model, tid, tasks[i][2]) for i, tid in enumerate(tids)]
        rows.append([float(alpha), *accs, float(np.mean(accs))])
        log.info("seed %d: alpha %.2f avg accuracy %.4f", seed, alpha, rows[-1][-1])

    table = np.array(rows)
    best = int(np.argmax(table[:, -1]))
    out = _seed_dir(cfg, seed)
    save_matrix(out / "alpha_table.csv", table, ["alpha", *tids, "average"])
    report = {
        "tool_version": __version__,
        "seed": seed,
        "config": resolved_config(cfg),
        "grid": [float(a) for a in grid],
        "table": [list(map(float, r)) for r in rows],
        "best_alpha": float(table[best, 0]),
        "best_average_accuracy": float(table[best, -1]),
    }
    save_report(out / "report_ablate.json", report)
    return report


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otmf",
        description="Continual model merging with mask-trained optimal-transport fusion.",
    )
    parser.add_argument("--version", action="version", version=f"otmf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config's seed list")
        p.add_argument("--out", help="override the config's output directory")

    common(sub.add_parser("gen", help="write the synthetic task stream"))
    common(sub.add_parser("train", help="fine-tune pretrained + per-task models"))
    p = sub.add_parser("merge", help="merge the task-vector stream")
    common(p)
    p.add_argument("--method", required=True, choices=_MERGE_METHODS)
    p = sub.add_parser("eval", help="score a checkpoint, dump feature clouds")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("ablate-alpha", help="accuracy table over an alpha grid")
    common(p)
    p.add_argument("--grid", required=True,
                   help="comma-separated alpha values, e.g. 0,0.1,0.2")
    return parser


def _run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config, args.seed, args.out)
    for seed in cfg.seeds:
        if args.command == "gen":
            cmd_gen(cfg, seed)
        elif args.command == "train":
            cmd_train(cfg, seed)
        elif args.command == "merge":
            cmd_merge(cfg, seed, args.method)
        elif args.command == "eval":
            cmd_eval(cfg, seed, args.checkpoint)
        elif args.command == "ablate-alpha":
            try:
                grid = [float(v) for v in args.grid.split(",") if v.strip() != ""]
            except ValueError as exc:
                raise ConfigError(f"bad --grid value: {args.grid}") from exc
            cmd_ablate_alpha(cfg, seed, grid)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("OTMF_LOG_LEVEL", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (DataError, ShapeMismatchError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return 3
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return 4
    except OtmfError as exc:  # any other toolkit failure counts as data/shape
        log.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
