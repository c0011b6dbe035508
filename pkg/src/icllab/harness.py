"""Experiment harness: YAML configs with grid expansion, a sweep runner
that persists one CSV + JSON manifest per experiment, aggregation with
95% confidence intervals, and oracle reference tables.

Each run writes its own part file (no write contention between workers);
the sweep merges parts into ``<experiment>.csv`` at the end.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import multiprocessing
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import yaml

from . import oracles as O
from . import taskgen as G
from . import trainer as TR
from .models import ModelSpec, count_params
from .taskgen import TaskSpec
from .tensor import ConfigurationError, ContractError
from .trainer import TrainConfig, TrainRecord, train_run

OUTPUT_DIR_ENV = "ICLLAB_OUTPUT_DIR"

CSV_COLUMNS = [
    "run_id", "experiment", "arch", "depth", "width", "param_count", "task",
    "task_params", "replicate", "step", "cumulative_flops", "split", "loss",
    "mse", "accuracy",
]

# task parameters that identify a distribution, in canonical order
_TASK_PARAM_FIELDS = {
    "icl_regression": ["n", "context_length", "noise", "pool_size"],
    "icl_classification": ["n", "context_length", "burstiness", "num_labels",
                           "within_cluster", "pool_size"],
    "mts": ["n", "context_length", "radius", "scrambled"],
    "sphere_oddball": ["n", "context_length", "perturb_distance", "box_size"],
    "line_oddball": ["n", "context_length", "perturb_distance"],
    "simple_regression": ["n", "noise", "chunk_size"],
    "simple_classification": ["n", "pool_size", "within_cluster", "chunk_size"],
    "same_different": ["num_symbols"],
}

_MODEL_FIELDS = ("kind", "depth", "width", "channel_width",
                 "use_positional_encoding", "embed_width", "rb_centered")


def _fmt(v) -> str:
    if v is None:
        return "inf"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)  # shortest round-trip-exact form
    return str(v)


def task_params_string(spec: TaskSpec) -> str:
    """Canonical ``key=value;...`` string identifying the task distribution."""
    fields = _TASK_PARAM_FIELDS[spec.kind]
    return ";".join(f"{f}={_fmt(getattr(spec, f))}" for f in fields)


@dataclass
class RunPlan:
    run_id: str
    model: ModelSpec
    task: TaskSpec
    train: TrainConfig
    replicate: int
    ood_evals: list


@dataclass
class ExperimentConfig:
    name: str
    models: list          # raw model grid entries
    task: dict            # raw task grid entry
    train: dict
    replicates: int = 5
    base_seed: int = 0
    output_dir: str = "results"
    ood_evals: list = dataclasses.field(default_factory=list)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        try:
            return cls._parse(raw)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"{path}: invalid experiment config: {exc}") from exc

    @classmethod
    def _parse(cls, raw: dict) -> "ExperimentConfig":
        known = {"name", "models", "task", "train", "replicates", "base_seed",
                 "output_dir", "ood_evals"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(
            name=str(raw["name"]),
            models=list(raw["models"]),
            task=dict(raw["task"]),
            train=dict(raw.get("train", {})),
            replicates=int(raw.get("replicates", 5)),
            base_seed=int(raw.get("base_seed", 0)),
            output_dir=str(raw.get("output_dir", "results")),
            ood_evals=list(raw.get("ood_evals", [])),
        )
        if cfg.replicates < 1:
            raise ConfigurationError("replicates must be >= 1")
        return cfg

    def semantic_dict(self) -> dict:
        """Everything that affects results (not where they are written)."""
        return {
            "name": self.name,
            "models": self.models,
            "task": self.task,
            "train": self.train,
            "replicates": self.replicates,
            "base_seed": self.base_seed,
            "ood_evals": self.ood_evals,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _expand(entry: dict) -> list[dict]:
    """Cartesian expansion of list-valued fields, in sorted key order."""
    keys = sorted(entry)
    lists = [(k, entry[k] if isinstance(entry[k], list) else [entry[k]]) for k in keys]
    out = []
    for combo in itertools.product(*(v for _, v in lists)):
        out.append({k: v for (k, _), v in zip(lists, combo)})
    return out


def build_task_spec(cell: dict, seed: int) -> TaskSpec:
    kind = cell["kind"]
    fields = {k: v for k, v in cell.items() if k != "kind"}
    return G.task_defaults(kind, seed=seed, **fields)


def build_model_spec(cell: dict, task: TaskSpec) -> ModelSpec:
    """Model grid entry plus the task's packing contract."""
    extra = {k: v for k, v in cell.items()
             if k in _MODEL_FIELDS and k not in ("kind", "depth", "width")}
    L, D = task.input_shape
    kind = cell["kind"]
    if kind in ("rb_mlp", "rb_mlp_deep") and "rb_centered" not in extra:
        extra["rb_centered"] = task.kind != "mts"
    spec = ModelSpec(
        kind=kind,
        depth=int(cell.get("depth", 1)),
        width=int(cell.get("width", 1)),
        input_length=L,
        token_depth=D,
        output_dim=task.output_dim,
        **extra,
    )
    spec.validate()
    return spec


def enumerate_runs(cfg: ExperimentConfig) -> list[RunPlan]:
    plans = []
    task_cells = _expand(cfg.task)
    for model_entry in cfg.models:
        entry = dict(model_entry)
        train_over = entry.pop("train", {})
        for model_cell in _expand(entry):
            for task_cell in task_cells:
                for rep in range(cfg.replicates):
                    seed = cfg.base_seed + rep
                    task = build_task_spec(task_cell, seed=seed)
                    model = build_model_spec(model_cell, task)
                    train_kw = dict(cfg.train)
                    train_kw.update(train_over)
                    train = TrainConfig(seed=seed, **train_kw)
                    parts = [cfg.name, model.kind, f"d{model.depth}", f"w{model.width}"]
                    if model.channel_width:
                        parts.append(f"c{model.channel_width}")
                    parts.append(task_params_string(task).replace(";", ","))
                    parts.append(f"r{rep}")
                    plans.append(RunPlan("__".join(parts), model, task, train, rep, cfg.ood_evals))
    return plans


def records_to_frame(records: list[TrainRecord], plan: RunPlan, experiment: str) -> pd.DataFrame:
    rows = []
    tps = task_params_string(plan.task)
    for r in records:
        rows.append({
            "run_id": r.run_id, "experiment": experiment, "arch": r.arch,
            "depth": r.depth, "width": r.width, "param_count": r.param_count,
            "task": plan.task.kind, "task_params": tps, "replicate": plan.replicate,
            "step": r.step, "cumulative_flops": r.cumulative_flops, "split": r.split,
            "loss": r.loss, "mse": r.mse, "accuracy": r.accuracy,
        })
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def write_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")


def _run_plan(plan: RunPlan, experiment: str, parts_dir: str) -> dict:
    protocol = TR.default_eval_protocol(plan.task)
    for ood in plan.ood_evals:
        opts = {k: v for k, v in ood.items() if k != "tag"}
        protocol.append(TR.ood_split(plan.task, ood["tag"], **opts))
    try:
        records, _ = train_run(plan.model, plan.task, plan.train,
                               eval_protocol=protocol, run_id=plan.run_id)
    except (TR.TrainingAborted, TR.NonFiniteGradientError, ContractError,
            ConfigurationError) as exc:
        return {"run_id": plan.run_id, "seed": plan.train.seed,
                "status": f"failed: {exc}"}
    frame = records_to_frame(records, plan, experiment)
    write_csv(frame, Path(parts_dir) / f"{plan.run_id}.csv")
    return {"run_id": plan.run_id, "seed": plan.train.seed, "status": "ok"}


def _run_plan_star(args):
    return _run_plan(*args)


def run_sweep(config_path, workers: Optional[int] = None,
              output_dir: Optional[str] = None) -> Path:
    """Execute every grid cell x replicate; returns the experiment CSV path."""
    cfg = ExperimentConfig.load(config_path)
    out_root = Path(output_dir or os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)
    out_dir = out_root / cfg.name
    parts_dir = out_dir / "parts"
    parts_dir.mkdir(parents=True, exist_ok=True)
    plans = enumerate_runs(cfg)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    workers = workers or os.cpu_count() or 1
    args = [(p, cfg.name, str(parts_dir)) for p in plans]
    if workers > 1 and len(plans) > 1:
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_run_plan_star, args)
    else:
        results = [_run_plan_star(a) for a in args]

    frames = []
    for plan, res in zip(plans, results):
        part = parts_dir / f"{plan.run_id}.csv"
        if res["status"] == "ok" and part.exists():
            frames.append(pd.read_csv(part, dtype={"task_params": str}))
    merged = (pd.concat(frames, ignore_index=True) if frames
              else pd.DataFrame(columns=CSV_COLUMNS))
    csv_path = out_dir / f"{cfg.name}.csv"
    write_csv(merged, csv_path)

    manifest = {
        "experiment": cfg.name,
        "config_hash": cfg.config_hash(),
        "runs": results,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "eval_episodes": int(cfg.train.get("eval_episodes", 512)),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return csv_path


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def summarize(csv_paths, group_by, step: Optional[int] = None,
              out_path=None) -> pd.DataFrame:
    """Mean and 95% CI half-width (1.96 s / sqrt(r)) per group over replicates.

    Rows are taken at the final recorded step of each (run, split) unless a
    step filter is given. With fewer than 2 replicates the CI is absent.
    """
    frames = [pd.read_csv(p, dtype={"task_params": str}) for p in np.atleast_1d(csv_paths)]
    df = pd.concat(frames, ignore_index=True)
    missing = [c for c in group_by if c not in df.columns]
    if missing:
        raise ConfigurationError(f"group_by columns not in CSV schema: {missing}")
    if step is None:
        last = df.groupby(["run_id", "split"])["step"].transform("max")
        df = df[df["step"] == last]
    else:
        df = df[df["step"] == step]

    def agg(group: pd.DataFrame) -> pd.Series:
        out = {"n": len(group)}
        for metric in ("loss", "mse", "accuracy"):
            vals = group[metric].dropna().to_numpy(dtype=float)
            if vals.size == 0:
                out[f"mean_{metric}"] = np.nan
                out[f"ci95_{metric}"] = np.nan
                continue
            out[f"mean_{metric}"] = vals.mean()
            if vals.size >= 2:
                out[f"ci95_{metric}"] = 1.96 * vals.std(ddof=1) / np.sqrt(vals.size)
            else:
                out[f"ci95_{metric}"] = np.nan
        return pd.Series(out)

    summary = (df.groupby(list(group_by), dropna=False)
                 .apply(agg, include_groups=False)
                 .reset_index()
                 .sort_values(list(group_by), kind="mergesort")
                 .reset_index(drop=True))
    summary["n"] = summary["n"].astype(int)
    if out_path is not None:
        write_csv(summary, out_path)
    return summary


# ---------------------------------------------------------------------------
# oracle tables
# ---------------------------------------------------------------------------

def oracle_table(task_cell: dict, episodes: int = 100_000, seed: int = 0,
                 out_path=None) -> pd.DataFrame:
    """Monte-Carlo / analytic reference values per task grid point."""
    rows = []
    for cell in _expand(dict(task_cell)):
        spec = build_task_spec(cell, seed=seed)
        tps = task_params_string(spec)
        base = {"task": spec.kind, "task_params": tps}
        if spec.kind == "icl_regression":
            unrestricted = replace(spec, pool_size=None)
            m, se = O.ridge_mse_reference(unrestricted, episodes=episodes)
            rows.append({**base, "oracle": "ridge", "metric": "mse", "value": m, "stderr": se})
            rows.append({**base, "oracle": "zero", "metric": "mse",
                         "value": O.baseline_zero_mse(spec), "stderr": 0.0})
            if spec.pool_size is not None:
                pool = G.sample_beta_pool(spec)
                m, se = O.dmmse_mse_reference(spec, pool, episodes=min(episodes, 20_000))
                rows.append({**base, "oracle": "dmmse", "metric": "mse", "value": m, "stderr": se})
        elif spec.kind == "icl_classification":
            ce = O.baseline_context_uniform_ce(spec.context_length, spec.burstiness)
            rows.append({**base, "oracle": "context_uniform", "metric": "ce",
                         "value": ce, "stderr": 0.0})
        elif spec.kind in ("sphere_oddball", "line_oddball"):
            acc, se = O.furthest_point_accuracy_reference(spec, episodes=episodes)
            rows.append({**base, "oracle": "furthest_point", "metric": "accuracy",
                         "value": acc, "stderr": se})
        elif spec.kind == "simple_regression":
            rows.append({**base, "oracle": "noise_floor", "metric": "mse",
                         "value": spec.noise, "stderr": 0.0})
    frame = pd.DataFrame(rows, columns=["task", "task_params", "oracle", "metric",
                                        "value", "stderr"])
    if out_path is not None:
        write_csv(frame, out_path)
    return frame


def oracle_result_rows(task_cell: dict, episodes: int = 100_000,
                       seed: int = 0) -> pd.DataFrame:
    """Oracle scores in the model-score CSV schema, arch = "oracle:<name>".

    Lets reference values sit in the same result files as trained models;
    the dedicated oracle-table schema above stays the figure-line source.
    """
    table = oracle_table(task_cell, episodes=episodes, seed=seed)
    rows = []
    for r in table.itertuples():
        name = f"oracle:{r.oracle}"
        rows.append({
            "run_id": name, "experiment": "oracle", "arch": name, "depth": 0,
            "width": 0, "param_count": 0, "task": r.task,
            "task_params": r.task_params, "replicate": 0, "step": 0,
            "cumulative_flops": 0, "split": "oracle",
            "loss": r.value, "mse": r.value if r.metric == "mse" else None,
            "accuracy": r.value if r.metric == "accuracy" else None,
        })
    return pd.DataFrame(rows, columns=CSV_COLUMNS)
