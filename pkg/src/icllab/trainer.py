"""Online AdamW training with analytic FLOP accounting and periodic
multi-split evaluation.

One run is strictly sequential and owns its RNG streams, parameters, and
optimizer state; the harness parallelizes across runs, never within one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import numpy as np

from . import models as M
from . import taskgen as G
from .losses import cross_entropy_loss, mse_loss
from .models import ModelSpec, ParamSet
from .taskgen import EpisodeBatch, TaskSpec
from .tensor import ContractError, Graph, Tensor, backward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1

# optimizer cost model: FLOPs per parameter per step
OPTIMIZER_FLOPS_PER_PARAM = 10

# elementwise op cost per output element; matmul is counted as 2mkn and
# reductions are charged per input element (a sum reads everything)
REDUCTION_KINDS = ("mean", "sum", "softmax_cross_entropy")
ELEMENTWISE_FLOPS = {
    "add": 1,
    "sub": 1,
    "mul": 1,
    "scalar_scale": 1,
    "relu": 1,
    "gelu": 10,
    "softmax_lastdim": 5,
    "layer_norm_lastdim": 8,
    "causal_masked_fill": 1,
    "mean": 1,
    "sum": 1,
    "softmax_cross_entropy": 6,
    "reshape": 0,
    "transpose": 0,
    "slice": 0,
    "concat": 0,
}


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient went non-finite; carries the parameter name."""


class TrainingAborted(RuntimeError):
    """Run stopped on a non-finite loss; carries last-good metadata."""

    def __init__(self, step: int, message: str, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    max_steps: int
    eval_every: int = 1000
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    eval_episodes: int = 512

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be > 0")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if self.max_steps < 1 or self.eval_every < 1:
            raise ContractError("max_steps and eval_every must be >= 1")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0


@dataclass
class TrainRecord:
    """One metrics row; the harness serializes these to CSV."""

    run_id: str
    arch: str
    depth: int
    width: int
    param_count: int
    step: int
    cumulative_flops: int
    split: str
    loss: float
    mse: Optional[float] = None
    accuracy: Optional[float] = None


@dataclass
class EvalSplit:
    """Named evaluation split: a callable producing fresh episode batches."""

    name: str
    sample: Callable[[int, int], EpisodeBatch]  # (count, eval_index) -> batch


def init_optimizer_state(params: ParamSet) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(t.data) for name, t in params.items()},
        v={name: np.zeros_like(t.data) for name, t in params.items()},
    )


def adamw_step(params: ParamSet, state: OptimizerState, cfg: TrainConfig) -> None:
    """Decoupled weight decay, then the bias-corrected adaptive step.

    Zero-gradient parameters still shrink by lr * weight_decay * theta.
    """
    state.t += 1
    c1 = 1.0 - ADAM_BETA1**state.t
    c2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
        if cfg.weight_decay:
            p.data -= cfg.lr * cfg.weight_decay * p.data
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        v *= ADAM_BETA2
        if g is not None:
            m += (1.0 - ADAM_BETA1) * g
            v += (1.0 - ADAM_BETA2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.grad = None


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------

def count_graph_flops(graph: Graph) -> int:
    """Analytic forward cost of a recorded graph: 2mkn per matmul, a fixed
    per-element charge for everything else."""
    total = 0
    for node in graph.nodes:
        if node.kind == "matmul":
            total += 2 * node.out.size * node.inputs[0].shape[-1]
        elif node.kind in REDUCTION_KINDS:
            total += ELEMENTWISE_FLOPS[node.kind] * node.inputs[0].size
        else:
            total += ELEMENTWISE_FLOPS[node.kind] * node.out.size
    return total


def _loss_from_batch(params: ParamSet, batch: EpisodeBatch):
    pred = M.forward(params, Tensor(batch.inputs))
    if np.issubdtype(batch.targets.dtype, np.integer):
        return pred, cross_entropy_loss(pred, batch.targets)
    target = Tensor(batch.targets.reshape(pred.shape))
    return pred, mse_loss(pred, target)


def forward_flops(model_spec: ModelSpec, task_spec: TaskSpec, batch: int) -> int:
    """Forward+loss cost of one batch, traced from the real op graph."""
    params = M.init_params(model_spec, seed=0)
    dummy = G.generate(replace(task_spec, seed=0), min(batch, G.CHUNK), stream="flop_trace")
    inputs = np.zeros((batch,) + dummy.inputs.shape[1:])
    targets = np.zeros(batch, dtype=dummy.targets.dtype)
    with Graph() as g:
        _loss_from_batch(params, EpisodeBatch(inputs, targets))
    return count_graph_flops(g)


def flops_per_step(model_spec: ModelSpec, task_spec: TaskSpec, batch: int) -> int:
    """One gradient step: forward + 2x forward for the backward pass, plus a
    flat optimizer charge per parameter."""
    fwd = forward_flops(model_spec, task_spec, batch)
    return 3 * fwd + OPTIMIZER_FLOPS_PER_PARAM * M.count_params(model_spec)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _as_batch(episodes) -> EpisodeBatch:
    if isinstance(episodes, EpisodeBatch):
        return episodes
    eps = list(episodes)
    if not eps:
        raise ContractError("evaluate needs a non-empty split")
    inputs = np.stack([e.input.data for e in eps])
    targets = np.array([e.target for e in eps])
    return EpisodeBatch(inputs, targets)


def evaluate(params: ParamSet, model_spec: ModelSpec, episodes,
             metric_set: Iterable[str] = ("loss",)) -> dict:
    """Mean metrics over one split. Regression reports loss == mse;
    classification reports loss (CE) and accuracy; ``mean_target_logit``
    averages the logit at the true class (the oddball-logit curve)."""
    batch = _as_batch(episodes)
    if len(batch) == 0:
        raise ContractError("evaluate needs a non-empty split")
    pred = M.forward(params, Tensor(batch.inputs))
    out: dict = {}
    metric_set = set(metric_set) | {"loss"}
    if np.issubdtype(batch.targets.dtype, np.integer):
        logits = pred.data.reshape(len(batch), -1)
        idx = batch.targets.astype(np.int64)
        m = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
        out["loss"] = float((lse - logits[np.arange(len(batch)), idx]).mean())
        if "accuracy" in metric_set:
            out["accuracy"] = float((logits.argmax(axis=1) == idx).mean())
        if "mean_target_logit" in metric_set:
            out["mean_target_logit"] = float(logits[np.arange(len(batch)), idx].mean())
    else:
        err = pred.data.reshape(len(batch)) - batch.targets
        out["loss"] = float((err**2).mean())
        if "mse" in metric_set:
            out["mse"] = out["loss"]
    return out


def default_metric_set(task_spec: TaskSpec) -> tuple:
    return ("loss", "accuracy") if task_spec.is_classification else ("loss", "mse")


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------

def _stream_split(name: str, spec: TaskSpec, fixed="auto", **opts) -> EvalSplit:
    def sample(count: int, eval_index: int) -> EpisodeBatch:
        return G.generate(spec, count, stream=f"eval/{name}/{eval_index}",
                          fixed=fixed, **opts)

    return EvalSplit(name, sample)


def default_eval_protocol(task_spec: TaskSpec) -> list[EvalSplit]:
    """The paper's evaluation splits for each task family."""
    kind = task_spec.kind
    if kind == "icl_regression":
        splits = [_stream_split("unrestricted_eval", replace(task_spec, pool_size=None))]
        if task_spec.pool_size is not None:
            pool = G.sample_beta_pool(task_spec)
            splits.insert(0, _stream_split("finite_eval", task_spec, fixed=pool))
        return splits
    if kind == "icl_classification":
        if task_spec.pool_size is None:
            return [_stream_split("eval", task_spec, fixed=None)]
        mixture = G.sample_mixture(task_spec)
        cache: dict = {}

        def probes(count: int, eval_index: int) -> dict[str, EpisodeBatch]:
            key = (count, eval_index)
            if key not in cache:
                cache.clear()
                cache[key] = G.make_classification_eval_batches(mixture, task_spec, count, eval_index)
            return cache[key]

        return [
            EvalSplit("iwl_probe", lambda c, e: probes(c, e)["iwl_probe"]),
            EvalSplit("novel_clusters", lambda c, e: probes(c, e)["novel_clusters"]),
            EvalSplit("swapped_labels", lambda c, e: probes(c, e)["swapped_labels"]),
        ]
    if kind == "same_different":
        split = G.split_symbols(task_spec)
        return [
            _stream_split("train_symbols", task_spec, fixed=split.train_half),
            _stream_split("heldout_symbols", task_spec, fixed=split.test_half),
        ]
    return [_stream_split("eval", task_spec)]


def ood_split(task_spec: TaskSpec, tag: str, **opts) -> EvalSplit:
    """An ood:<tag> split sampling the task with overridden parameters."""
    return _stream_split(f"ood:{tag}", task_spec, **opts)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ParamSet, state: OptimizerState, step: int) -> None:
    arrays = {f"param/{k}": t.data for k, t in params.items()}
    arrays.update({f"m/{k}": v for k, v in state.m.items()})
    arrays.update({f"v/{k}": v for k, v in state.v.items()})
    np.savez(path, __version__=CHECKPOINT_VERSION, __step__=step, **arrays)


def load_checkpoint(path, model_spec: ModelSpec) -> tuple[ParamSet, OptimizerState, int]:
    with np.load(path) as z:
        if int(z["__version__"]) != CHECKPOINT_VERSION:
            raise ContractError(f"checkpoint version {z['__version__']} not supported")
        params = M.init_params(model_spec, seed=0)
        state = init_optimizer_state(params)
        for name, t in params.items():
            t.data = z[f"param/{name}"]
            state.m[name] = z[f"m/{name}"]
            state.v[name] = z[f"v/{name}"]
        step = int(z["__step__"])
    state.t = step
    return params, state, step


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def train_run(model_spec: ModelSpec, task_spec: TaskSpec, train_cfg: TrainConfig,
              eval_protocol: Optional[list[EvalSplit]] = None,
              run_id: str = "run", metric_set: Optional[tuple] = None,
              checkpoint_path=None, progress: Optional[Callable[[int], None]] = None,
              ) -> tuple[list[TrainRecord], ParamSet]:
    """Train online and return (records, final params).

    A fresh batch is drawn from the generator at every step; every
    ``eval_every`` steps each protocol split is evaluated on
    ``eval_episodes`` fresh episodes. The ``train`` split rows carry the
    mean online batch loss since the previous record.
    """
    model_spec.validate()
    task_spec.validate()
    train_cfg.validate()
    if eval_protocol is None:
        eval_protocol = default_eval_protocol(task_spec)
    if metric_set is None:
        metric_set = default_metric_set(task_spec)

    params = M.init_params(model_spec, train_cfg.seed)
    state = init_optimizer_state(params)
    fixed = G.default_fixed(task_spec)
    step_flops = flops_per_step(model_spec, task_spec, train_cfg.batch_size)
    n_params = M.count_params(model_spec)
    records: list[TrainRecord] = []

    def record(step: int, split: str, metrics: dict) -> None:
        # classification rows never use the mse slot, so it can carry the
        # mean true-class logit (the logit-vs-distance curves) when asked
        mse = metrics.get("mse", metrics.get("mean_target_logit"))
        records.append(
            TrainRecord(
                run_id=run_id,
                arch=model_spec.kind,
                depth=model_spec.depth,
                width=model_spec.width,
                param_count=n_params,
                step=step,
                cumulative_flops=step * step_flops,
                split=split,
                loss=metrics["loss"],
                mse=mse,
                accuracy=metrics.get("accuracy"),
            )
        )

    def run_evals(step: int, eval_index: int) -> None:
        for split in eval_protocol:
            batch = split.sample(train_cfg.eval_episodes, eval_index)
            record(step, split.name, evaluate(params, model_spec, batch, metric_set))

    window: list[float] = []
    eval_index = 0
    last_good = 0
    for step in range(train_cfg.max_steps):
        batch = G.generate(task_spec, train_cfg.batch_size,
                           start=step * train_cfg.batch_size, stream="train", fixed=fixed)
        with Graph() as g:
            _, loss = _loss_from_batch(params, batch)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, params, state, last_good)
                raise TrainingAborted(
                    last_good,
                    f"non-finite training loss at step {step + 1}; "
                    f"last good step {last_good}",
                    checkpoint_path,
                )
            backward(g, loss)
        if step == 0:
            record(0, "train", {"loss": loss_val})
            run_evals(0, eval_index)
            eval_index += 1
        adamw_step(params, state, train_cfg)
        last_good = step + 1
        window.append(loss_val)
        done = step + 1
        if done % train_cfg.eval_every == 0 or done == train_cfg.max_steps:
            record(done, "train", {"loss": float(np.mean(window))})
            window.clear()
            run_evals(done, eval_index)
            eval_index += 1
            if progress is not None:
                progress(done)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, state, train_cfg.max_steps)
    return records, params
