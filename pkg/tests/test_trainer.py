"""Optimizer arithmetic, FLOP accounting, and the training loop contract."""

import numpy as np
import pytest

from icllab import models as M
from icllab import taskgen as G
from icllab import trainer as TR
from icllab.models import ModelSpec
from icllab.taskgen import task_defaults
from icllab.tensor import ContractError, Tensor
from icllab.trainer import (
    TrainConfig,
    TrainingAborted,
    adamw_step,
    evaluate,
    flops_per_step,
    init_optimizer_state,
    train_run,
)


def tiny_mlp(**kw):
    base = dict(kind="mlp", depth=1, width=3, input_length=2, token_depth=1, output_dim=1)
    base.update(kw)
    return ModelSpec(**base)


class TestAdamW:
    def test_pure_decay_with_zero_gradient(self):
        spec = tiny_mlp()
        params = M.init_params(spec, seed=0)
        params["b_out"].data[...] = 1.0
        state = init_optimizer_state(params)
        for t in params.values():
            t.grad = np.zeros_like(t.data)
        adamw_step(params, state, TrainConfig(max_steps=1, lr=1e-4, weight_decay=1e-4))
        assert params["b_out"].data[0] == pytest.approx(1.0 - 1e-8, abs=1e-18)

    def test_first_step_adaptive_magnitude_is_lr(self):
        spec = tiny_mlp()
        params = M.init_params(spec, seed=0)
        theta0 = params["b_out"].data.copy()
        state = init_optimizer_state(params)
        g = 0.37
        params["b_out"].grad = np.full(1, g)
        adamw_step(params, state, TrainConfig(max_steps=1, lr=1e-4, weight_decay=0.0))
        # t=1: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        expect = theta0[0] - 1e-4 * g / (abs(g) + TR.ADAM_EPS)
        assert params["b_out"].data[0] == pytest.approx(expect, abs=1e-16)

    def test_nonfinite_gradient_names_parameter(self):
        spec = tiny_mlp()
        params = M.init_params(spec, seed=0)
        state = init_optimizer_state(params)
        params["W_1"].grad = np.full((2, 3), np.nan)
        with pytest.raises(TR.NonFiniteGradientError, match="W_1"):
            adamw_step(params, state, TrainConfig(max_steps=1))

    def test_identical_runs_bit_identical_after_100_steps(self):
        spec = tiny_mlp(width=8)
        task = task_defaults("simple_regression", n=2, seed=5)
        cfg = TrainConfig(max_steps=100, eval_every=50, batch_size=16, seed=9,
                          eval_episodes=32)
        rec1, p1 = train_run(spec, task, cfg)
        rec2, p2 = train_run(spec, task, cfg)
        assert np.array_equal(M.pack_params(p1), M.pack_params(p2))
        assert [r.loss for r in rec1] == [r.loss for r in rec2]


class TestFlops:
    def test_hand_derived_single_hidden_layer_constant(self):
        # forward graph on one (2,1) input, width 3, scalar output:
        #   matmul (1,2)@(2,3) = 2*1*2*3 = 12    bias add 3    relu 3
        #   matmul (1,3)@(3,1) = 2*1*3*1 = 6     bias add 1
        #   mse: sub 1, mul 1, mean 1
        # forward total = 28; params = 13
        # step = 3 * 28 + 10 * 13 = 214
        spec = tiny_mlp()
        task = task_defaults("simple_regression", n=2, seed=0)
        assert flops_per_step(spec, task, batch=1) == 214

    def test_batch_doubles_everything_but_optimizer(self):
        spec = tiny_mlp(width=16)
        task = task_defaults("simple_regression", n=2, seed=0)
        opt = TR.OPTIMIZER_FLOPS_PER_PARAM * M.count_params(spec)
        f1 = flops_per_step(spec, task, batch=32) - opt
        f2 = flops_per_step(spec, task, batch=64) - opt
        assert f2 == 2 * f1

    def test_transformer_costs_more_than_mlp_at_matched_size(self):
        task = task_defaults("icl_regression", seed=0)
        mlp = ModelSpec("mlp", depth=2, width=64, input_length=9, token_depth=9, output_dim=1)
        tf = ModelSpec("transformer", depth=2, width=64, input_length=9, token_depth=9,
                       output_dim=1)
        assert flops_per_step(tf, task, 128) > flops_per_step(mlp, task, 128)

    def test_cumulative_flops_exactly_step_linear(self):
        spec = tiny_mlp()
        task = task_defaults("simple_regression", n=2, seed=1)
        cfg = TrainConfig(max_steps=30, eval_every=10, batch_size=8, eval_episodes=16)
        records, _ = train_run(spec, task, cfg)
        per_step = flops_per_step(spec, task, 8)
        for r in records:
            assert r.cumulative_flops == r.step * per_step
        steps = [r.step for r in records if r.split == "train"]
        assert steps == sorted(set(steps))


class TestEvaluate:
    def test_untrained_wide_classifier_near_uniform_ce(self):
        task = task_defaults("icl_classification", seed=2)
        spec = ModelSpec("mlp", depth=2, width=64, input_length=17, token_depth=8,
                         output_dim=32)
        params = M.init_params(spec, seed=3)
        batch = G.generate(task, 512)
        out = evaluate(params, spec, batch, ("loss", "accuracy"))
        assert abs(out["loss"] - np.log(32)) < 0.2

    def test_exact_linear_model_gets_zero_loss(self):
        task = task_defaults("simple_regression", n=4, noise=0.0, seed=4)
        beta = G.sample_fixed_beta(task)
        spec = ModelSpec("mlp", depth=1, width=8, input_length=4, token_depth=1, output_dim=1)
        params = M.init_params(spec, seed=0)
        for t in params.values():
            t.data[...] = 0.0
        params["W_1"].data[:, 0] = beta
        params["W_1"].data[:, 1] = -beta
        params["W_out"].data[0, 0] = 1.0
        params["W_out"].data[1, 0] = -1.0
        out = evaluate(params, spec, G.generate(task, 256), ("loss", "mse"))
        assert out["loss"] < 1e-25
        assert out["mse"] == out["loss"]

    def test_identity_rb_readout_gets_accuracy_one(self):
        task = task_defaults("mts", seed=6)
        spec = ModelSpec("rb_mlp", depth=1, width=1, input_length=6, token_depth=2,
                         output_dim=5, rb_centered=False)
        params = M.init_params(spec, seed=0)
        params["W_out"].data[...] = np.eye(5)
        params["b_out"].data[...] = 0.0
        out = evaluate(params, spec, G.generate(task, 512), ("loss", "accuracy"))
        assert out["accuracy"] == 1.0

    def test_oracle_predictions_through_eval_arithmetic(self):
        # the ridge oracle's MSE and the evaluate() mean-squared-error agree
        # when fed the same episodes and predictions
        from icllab.oracles import ridge_coefficients

        task = task_defaults("icl_regression", seed=7)
        b = G.generate(task, 4096, stream="oracle_ref")
        X, y = b.inputs[:, :8, :8], b.inputs[:, :8, 8]
        beta = ridge_coefficients(X, y, 8, task.noise)
        pred = np.einsum("mn,mn->m", beta, b.inputs[:, 8, :8])
        direct = float(((pred - b.targets) ** 2).mean())
        from icllab.oracles import ridge_mse_reference

        ref, _ = ridge_mse_reference(task, episodes=4096)
        assert direct == pytest.approx(ref, abs=1e-12)

    def test_empty_split_rejected(self):
        spec = tiny_mlp()
        params = M.init_params(spec, seed=0)
        with pytest.raises(ContractError):
            evaluate(params, spec, [], ("loss",))

    def test_mean_target_logit_metric(self):
        task = task_defaults("sphere_oddball", seed=8)
        spec = ModelSpec("mlp", depth=1, width=16, input_length=6, token_depth=2,
                         output_dim=6)
        params = M.init_params(spec, seed=1)
        batch = G.generate(task, 64)
        out = evaluate(params, spec, batch, ("loss", "mean_target_logit"))
        logits = M.forward(params, Tensor(batch.inputs)).data
        expect = logits[np.arange(64), batch.targets].mean()
        assert out["mean_target_logit"] == pytest.approx(expect, rel=1e-12)


class TestTrainRun:
    def test_records_schema_and_splits(self):
        spec = tiny_mlp(width=4, input_length=8, token_depth=1)
        task = task_defaults("simple_regression", n=8, seed=10)
        cfg = TrainConfig(max_steps=20, eval_every=10, batch_size=8, eval_episodes=16)
        records, _ = train_run(spec, task, cfg, run_id="unit")
        splits = {r.split for r in records}
        assert splits == {"train", "eval"}
        assert all(r.run_id == "unit" and r.arch == "mlp" for r in records)
        assert {r.step for r in records} == {0, 10, 20}
        assert all(np.isfinite(r.loss) for r in records)

    def test_regression_protocol_has_both_distributions(self):
        task = task_defaults("icl_regression", pool_size=4, seed=11)
        spec = ModelSpec("mlp", depth=1, width=8, input_length=9, token_depth=9, output_dim=1)
        cfg = TrainConfig(max_steps=5, eval_every=5, batch_size=8, eval_episodes=16)
        records, _ = train_run(spec, task, cfg)
        assert {r.split for r in records} == {"train", "finite_eval", "unrestricted_eval"}

    def test_classification_protocol_probes(self):
        task = task_defaults("icl_classification", pool_size=32, seed=12)
        spec = ModelSpec("mlp", depth=1, width=8, input_length=17, token_depth=8,
                         output_dim=32)
        cfg = TrainConfig(max_steps=4, eval_every=4, batch_size=8, eval_episodes=16)
        records, _ = train_run(spec, task, cfg)
        assert {r.split for r in records} == {
            "train", "iwl_probe", "novel_clusters", "swapped_labels"
        }

    def test_ood_split_naming(self):
        task = task_defaults("sphere_oddball", seed=13)
        spec = ModelSpec("mlp", depth=1, width=8, input_length=6, token_depth=2, output_dim=6)
        protocol = TR.default_eval_protocol(task) + [TR.ood_split(task, "d=8", d=8.0)]
        cfg = TrainConfig(max_steps=4, eval_every=4, batch_size=8, eval_episodes=16)
        records, _ = train_run(spec, task, cfg, eval_protocol=protocol)
        assert "ood:d=8" in {r.split for r in records}

    def test_divergence_aborts_with_metadata(self, tmp_path):
        spec = tiny_mlp(width=8, input_length=8)
        task = task_defaults("simple_regression", n=8, seed=14)
        cfg = TrainConfig(max_steps=2000, eval_every=2000, batch_size=8, lr=1e10,
                          eval_episodes=8)
        ckpt = tmp_path / "last_good.npz"
        with pytest.raises(TrainingAborted) as info:
            train_run(spec, task, cfg, checkpoint_path=str(ckpt))
        assert info.value.step >= 0
        assert ckpt.exists()

    def test_checkpoint_roundtrip(self, tmp_path):
        spec = tiny_mlp(width=8)
        task = task_defaults("simple_regression", n=2, seed=15)
        cfg = TrainConfig(max_steps=10, eval_every=10, batch_size=8, eval_episodes=8)
        path = tmp_path / "ck.npz"
        _, params = train_run(spec, task, cfg, checkpoint_path=str(path))
        loaded, state, step = TR.load_checkpoint(str(path), spec)
        assert step == 10
        assert np.array_equal(M.pack_params(loaded), M.pack_params(params))

    def test_rb_mlp_solves_mts_quickly(self):
        # shallow RB on match-to-sample exceeds 99% accuracy within 4k steps
        task = task_defaults("mts", seed=16)
        spec = ModelSpec("rb_mlp", depth=1, width=1, input_length=6, token_depth=2,
                         output_dim=5, rb_centered=False)
        cfg = TrainConfig(max_steps=4000, eval_every=1000, batch_size=128,
                          lr=1e-2, eval_episodes=512)
        records, _ = train_run(spec, task, cfg)
        final_acc = [r.accuracy for r in records if r.split == "eval"][-1]
        assert final_acc > 0.99


class TestTrainerInvariants:
    def test_decay_moves_every_parameter(self):
        # lambda > 0: even zero-gradient parameters shrink by the decay term
        spec = tiny_mlp(width=4)
        params = M.init_params(spec, seed=3)
        params["b_1"].data[...] = 0.5  # nonzero so decay is visible
        before = M.pack_params(params).copy()
        state = init_optimizer_state(params)
        grads = {"W_1": np.ones((2, 4))}  # only one tensor gets a gradient
        for name, t in params.items():
            t.grad = grads.get(name)
        adamw_step(params, state, TrainConfig(max_steps=1, lr=1e-3, weight_decay=1e-2))
        after = M.pack_params(params)
        moved = before != after
        nonzero_before = before != 0
        assert np.all(moved[nonzero_before])

    def test_task_seed_changes_stream_not_schema(self):
        spec = tiny_mlp(width=4, input_length=4)
        cfg = TrainConfig(max_steps=10, eval_every=5, batch_size=8, eval_episodes=16)
        rec_a, _ = train_run(spec, task_defaults("simple_regression", n=4, seed=1), cfg)
        rec_b, _ = train_run(spec, task_defaults("simple_regression", n=4, seed=2), cfg)
        assert [(r.step, r.split) for r in rec_a] == [(r.step, r.split) for r in rec_b]
        assert [r.loss for r in rec_a] != [r.loss for r in rec_b]


@pytest.mark.slow_smoke
def test_regression_training_loss_halves_quickly():
    # smoke threshold: the online training loss falls by >= 50% of its
    # step-0 value within the first 20k steps on unrestricted regression
    task = task_defaults("icl_regression", seed=21)
    spec = ModelSpec("mlp", depth=2, width=128, input_length=9, token_depth=9,
                     output_dim=1)
    cfg = TrainConfig(max_steps=20000, eval_every=2000, batch_size=128, seed=0,
                      eval_episodes=64)
    records, _ = train_run(spec, task, cfg)
    train_losses = [r.loss for r in records if r.split == "train"]
    assert min(train_losses) <= 0.5 * train_losses[0]
