"""Deterministic figure rendering from harness CSVs and summaries.

Six figure kinds cover the experiment panels: compute-vs-loss scatters,
context-length curves, diversity transitions, OOD accuracy panels, the
logit-vs-distance curve, and the same-different generalization curve.

Statistics (means, 95% CI half-widths) come from the harness `summarize`
aggregation; this module only selects, arranges, and draws. Rendering the
same inputs twice produces byte-identical images: a fixed style, no
timestamps, and a scrubbed PNG metadata block.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import matplotlib
import numpy as np
import pandas as pd
import yaml

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

FIGURE_KINDS = (
    "compute_scatter",
    "context_sweep",
    "diversity_transition",
    "ood_panel",
    "logit_distance",
    "samediff_curve",
)

RESULT_COLUMNS = {
    "run_id", "experiment", "arch", "depth", "width", "param_count", "task",
    "task_params", "replicate", "step", "cumulative_flops", "split", "loss",
    "mse", "accuracy",
}

ARCH_COLORS = {
    "mlp": "#1f77b4",
    "mixer": "#2ca02c",
    "transformer": "#d62728",
    "rb_mlp": "#9467bd",
    "rb_mlp_deep": "#8c564b",
}

STYLE = {
    "figure.figsize": (5.2, 3.6),
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.25,
}


class FigureError(ValueError):
    """Bad figure spec or unusable data selection."""


@dataclass
class FigureSpec:
    kind: str
    inputs: list
    output: str
    split: Optional[str] = None
    metric: str = "loss"
    logx: bool = True
    logy: bool = False
    references: list = field(default_factory=list)
    reference_oracles: list = field(default_factory=list)
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    param_key: Optional[str] = None   # task_params key for the x axis
    splits: list = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "FigureSpec":
        raw = yaml.safe_load(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise FigureError(f"{path}: unknown figure-spec keys {sorted(unknown)}")
        spec = cls(**raw)
        if spec.kind not in FIGURE_KINDS:
            raise FigureError(f"{path}: unknown figure kind {spec.kind!r}")
        if not spec.inputs:
            raise FigureError(f"{path}: needs at least one input CSV")
        return spec


def _load_results(spec: FigureSpec, data_dir: Path) -> pd.DataFrame:
    frames = []
    for rel in spec.inputs:
        path = data_dir / rel
        if not path.exists():
            raise FigureError(f"input CSV not found: {path}")
        frames.append(pd.read_csv(path, dtype={"task_params": str}))
    df = pd.concat(frames, ignore_index=True)
    missing = RESULT_COLUMNS - set(df.columns)
    if missing:
        raise FigureError(f"input CSVs missing result columns: {sorted(missing)}")
    return df


def _load_references(spec: FigureSpec, data_dir: Path) -> pd.DataFrame:
    frames = []
    for rel in spec.references:
        path = data_dir / rel
        if not path.exists():
            raise FigureError(f"reference CSV not found: {path}")
        frames.append(pd.read_csv(path, dtype={"task_params": str}))
    if not frames:
        return pd.DataFrame(columns=["task", "task_params", "oracle", "metric",
                                     "value", "stderr"])
    refs = pd.concat(frames, ignore_index=True)
    if spec.reference_oracles:
        refs = refs[refs["oracle"].isin(spec.reference_oracles)]
    return refs


def _metric_column(df: pd.DataFrame, metric: str) -> str:
    col = {"mse": "mse", "loss": "loss", "ce": "loss", "accuracy": "accuracy",
           "logit": "mse"}.get(metric, metric)
    if col not in df.columns:
        raise FigureError(f"metric column {col!r} not in CSV schema")
    return col


def _param_value(task_params: str, key: str) -> float:
    m = re.search(rf"(?:^|;){re.escape(key)}=([^;]+)", task_params)
    if m is None:
        raise FigureError(f"task_params {task_params!r} lacks key {key!r}")
    v = m.group(1)
    return float("inf") if v == "inf" else float(v)


def _final_step_rows(df: pd.DataFrame) -> pd.DataFrame:
    last = df.groupby(["run_id", "split"])["step"].transform("max")
    return df[df["step"] == last]


def _ci_stats(rows: pd.DataFrame, col: str, by: list) -> pd.DataFrame:
    def agg(g):
        vals = g[col].dropna().to_numpy(dtype=float)
        mean = vals.mean() if vals.size else np.nan
        ci = 1.96 * vals.std(ddof=1) / np.sqrt(vals.size) if vals.size >= 2 else 0.0
        return pd.Series({"mean": mean, "ci": ci, "n": len(vals)})

    return (rows.groupby(by, dropna=False).apply(agg, include_groups=False)
            .reset_index().sort_values(by, kind="mergesort"))


def _draw_reference_lines(ax, refs: pd.DataFrame) -> None:
    styles = {"ridge": ("#d62728", "--"), "dmmse": ("#7f7f7f", "--"),
              "zero": ("#7f7f7f", ":"), "context_uniform": ("#7f7f7f", "--"),
              "furthest_point": ("#d62728", "--"), "noise_floor": ("#d62728", "--")}
    for oracle in sorted(refs["oracle"].unique()):
        sub = refs[refs["oracle"] == oracle]
        color, ls = styles.get(oracle, ("#444444", "--"))
        ax.axhline(sub["value"].iloc[0], color=color, linestyle=ls, linewidth=1.1,
                   label=f"{oracle} reference")


def _save(fig, out_path: Path) -> None:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="png", metadata={"Software": "figplots"})
    plt.close(fig)


def _select_split(df: pd.DataFrame, split: Optional[str]) -> pd.DataFrame:
    if split is None:
        return df
    out = df[df["split"] == split]
    if out.empty:
        raise FigureError(f"no data for split {split!r}")
    return out


def render(spec: FigureSpec, data_dir, out_dir) -> Path:
    """Render one figure spec; returns the output image path."""
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    df = _load_results(spec, data_dir)
    refs = _load_references(spec, data_dir)
    out_path = out_dir / spec.output
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        kind_fn = {
            "compute_scatter": _render_compute_scatter,
            "context_sweep": _render_param_sweep,
            "diversity_transition": _render_diversity_transition,
            "ood_panel": _render_ood_panel,
            "logit_distance": _render_logit_distance,
            "samediff_curve": _render_samediff_curve,
        }[spec.kind]
        kind_fn(spec, df, refs, ax)
        if spec.title:
            ax.set_title(spec.title)
        if spec.xlabel:
            ax.set_xlabel(spec.xlabel)
        if spec.ylabel:
            ax.set_ylabel(spec.ylabel)
        ax.legend(fontsize=7, loc="best")
        fig.tight_layout()
        _save(fig, out_path)
    return out_path


def _render_compute_scatter(spec, df, refs, ax):
    col = _metric_column(df, spec.metric)
    rows = _select_split(df, spec.split or "eval")
    rows = rows[rows["step"] > 0]
    if rows.empty:
        raise FigureError("no data rows selected for compute scatter")
    for arch in sorted(rows["arch"].unique()):
        sub = rows[rows["arch"] == arch]
        ax.scatter(sub["cumulative_flops"], sub[col], s=9,
                   color=ARCH_COLORS.get(arch, "#333333"), label=arch, alpha=0.75)
    if spec.logx:
        ax.set_xscale("log")
    if spec.logy:
        ax.set_yscale("log")
    _draw_reference_lines(ax, refs)
    ax.set_xlabel(spec.xlabel or "cumulative FLOPs")
    ax.set_ylabel(spec.ylabel or spec.metric)


def _render_param_sweep(spec, df, refs, ax, param_key=None):
    """Mean +- CI of the final-step metric against one task parameter."""
    key = param_key or spec.param_key or "context_length"
    col = _metric_column(df, spec.metric)
    rows = _select_split(_final_step_rows(df), spec.split)
    if rows.empty:
        raise FigureError("no data rows selected for parameter sweep")
    rows = rows.assign(_x=rows["task_params"].map(lambda s: _param_value(s, key)))
    stats = _ci_stats(rows, col, ["arch", "_x"])
    for arch in sorted(stats["arch"].unique()):
        sub = stats[stats["arch"] == arch].sort_values("_x")
        color = ARCH_COLORS.get(arch, "#333333")
        ax.plot(sub["_x"], sub["mean"], marker="o", markersize=3, color=color, label=arch)
        ax.fill_between(sub["_x"], sub["mean"] - sub["ci"], sub["mean"] + sub["ci"],
                        color=color, alpha=0.2, linewidth=0)
    if not refs.empty:
        for oracle in sorted(refs["oracle"].unique()):
            sub = refs[refs["oracle"] == oracle]
            if len(sub) > 1 and spec.param_key:
                xs = sub["task_params"].map(lambda s: _param_value(s, key))
                order = np.argsort(xs.to_numpy())
                ax.plot(xs.to_numpy()[order], sub["value"].to_numpy()[order],
                        "--", color="#7f7f7f", linewidth=1.1,
                        label=f"{oracle} reference")
            else:
                _draw_reference_lines(ax, sub)
    if spec.logx:
        ax.set_xscale("log", base=2)
    if spec.logy:
        ax.set_yscale("log")
    ax.set_xlabel(spec.xlabel or key)
    ax.set_ylabel(spec.ylabel or spec.metric)


def _render_diversity_transition(spec, df, refs, ax):
    """Final metric vs pool size, one curve per (arch, split)."""
    key = spec.param_key or "pool_size"
    col = _metric_column(df, spec.metric)
    rows = _final_step_rows(df)
    wanted = spec.splits or sorted(set(rows["split"].unique()) - {"train"})
    rows = rows[rows["split"].isin(wanted)]
    if rows.empty:
        raise FigureError("no data rows selected for diversity transition")
    rows = rows.assign(_x=rows["task_params"].map(lambda s: _param_value(s, key)))
    stats = _ci_stats(rows, col, ["arch", "split", "_x"])
    linestyles = {s: ls for s, ls in zip(wanted, ("-", "--", ":", "-."))}
    for (arch, split), sub in stats.groupby(["arch", "split"], sort=True):
        sub = sub.sort_values("_x")
        color = ARCH_COLORS.get(arch, "#333333")
        ax.plot(sub["_x"], sub["mean"], marker="o", markersize=3, color=color,
                linestyle=linestyles.get(split, "-"), label=f"{arch} {split}")
        ax.fill_between(sub["_x"], sub["mean"] - sub["ci"], sub["mean"] + sub["ci"],
                        color=color, alpha=0.15, linewidth=0)
    if not refs.empty:
        for oracle in sorted(refs["oracle"].unique()):
            sub = refs[refs["oracle"] == oracle]
            if len(sub) > 1:
                xs = sub["task_params"].map(lambda s: _param_value(s, key)).to_numpy()
                order = np.argsort(xs)
                ax.plot(xs[order], sub["value"].to_numpy()[order], "--",
                        color="#7f7f7f", linewidth=1.1, label=f"{oracle} reference")
            else:
                _draw_reference_lines(ax, sub)
    ax.set_xscale("log", base=2)
    ax.set_xlabel(spec.xlabel or "task diversity k")
    ax.set_ylabel(spec.ylabel or spec.metric)


def _ood_distance(split: str) -> Optional[float]:
    m = re.fullmatch(r"ood:d=([0-9.+-eE]+)", split)
    return float(m.group(1)) if m else None


def _render_ood_panel(spec, df, refs, ax):
    """Accuracy against OOD perturbation distance, plus in-distribution."""
    col = _metric_column(df, spec.metric or "accuracy")
    rows = _final_step_rows(df)
    rows = rows.assign(_d=rows["split"].map(_ood_distance))
    rows = rows[rows["_d"].notna()]
    if rows.empty:
        raise FigureError("no ood:d=... splits in the selection")
    stats = _ci_stats(rows, col, ["arch", "_d"])
    for arch in sorted(stats["arch"].unique()):
        sub = stats[stats["arch"] == arch].sort_values("_d")
        color = ARCH_COLORS.get(arch, "#333333")
        ax.errorbar(sub["_d"], sub["mean"], yerr=sub["ci"], marker="o",
                    markersize=3, color=color, label=arch, capsize=2)
    if not refs.empty:
        xs = refs["task_params"].map(lambda s: _param_value(s, "perturb_distance"))
        order = np.argsort(xs.to_numpy())
        ax.plot(xs.to_numpy()[order], refs["value"].to_numpy()[order], "--",
                color="#d62728", linewidth=1.1, label="furthest-point reference")
    ax.set_xlabel(spec.xlabel or "perturbation distance d")
    ax.set_ylabel(spec.ylabel or col)


def _render_logit_distance(spec, df, refs, ax):
    """Mean true-class logit vs distance (carried in the mse column)."""
    rows = _final_step_rows(df)
    rows = rows.assign(_d=rows["split"].map(_ood_distance))
    rows = rows[rows["_d"].notna() & rows["mse"].notna()]
    if rows.empty:
        raise FigureError("no logit-bearing ood splits in the selection")
    stats = _ci_stats(rows, "mse", ["arch", "_d"])
    for arch in sorted(stats["arch"].unique()):
        sub = stats[stats["arch"] == arch].sort_values("_d")
        color = ARCH_COLORS.get(arch, "#333333")
        ax.errorbar(sub["_d"], sub["mean"], yerr=sub["ci"], marker="o",
                    markersize=3, color=color, label=arch, capsize=2)
    ax.set_xlabel(spec.xlabel or "oddball distance d")
    ax.set_ylabel(spec.ylabel or "mean oddball logit")


def _render_samediff_curve(spec, df, refs, ax):
    """Held-out accuracy against the symbol-set size."""
    col = _metric_column(df, spec.metric or "accuracy")
    rows = _select_split(_final_step_rows(df), spec.split or "heldout_symbols")
    rows = rows.assign(_x=rows["task_params"].map(
        lambda s: _param_value(s, "num_symbols")))
    stats = _ci_stats(rows, col, ["arch", "_x"])
    for arch in sorted(stats["arch"].unique()):
        sub = stats[stats["arch"] == arch].sort_values("_x")
        color = ARCH_COLORS.get(arch, "#333333")
        ax.plot(sub["_x"], sub["mean"], marker="o", markersize=3, color=color,
                label=f"{arch} held-out")
        ax.fill_between(sub["_x"], sub["mean"] - sub["ci"], sub["mean"] + sub["ci"],
                        color=color, alpha=0.2, linewidth=0)
    ax.axhline(0.5, color="#7f7f7f", linestyle="--", linewidth=1.1, label="chance")
    ax.set_xscale("log", base=2)
    ax.set_xlabel(spec.xlabel or "symbol count |X|")
    ax.set_ylabel(spec.ylabel or "held-out accuracy")


def render_all(spec_dir, data_dir, out_dir) -> list[Path]:
    """Render every committed figure spec in a directory."""
    spec_dir = Path(spec_dir)
    paths = sorted(spec_dir.glob("*.yaml")) + sorted(spec_dir.glob("*.yml"))
    if not paths:
        raise FigureError(f"no figure specs under {spec_dir}")
    return [render(FigureSpec.load(p), data_dir, out_dir) for p in paths]
