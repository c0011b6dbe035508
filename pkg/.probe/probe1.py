import json, time
import numpy as np
from icllab.models import ModelSpec
from icllab.taskgen import task_defaults
from icllab.trainer import TrainConfig, train_run

out = {}
t0 = time.time()

# 1) shallow RB on MTS at paper lr: does it clear 0.99 by 4k steps?
task = task_defaults("mts", seed=16)
spec = ModelSpec("rb_mlp", depth=1, width=1, input_length=6, token_depth=2,
                 output_dim=5, rb_centered=False)
cfg = TrainConfig(max_steps=4000, eval_every=500, batch_size=128, lr=1e-4, eval_episodes=512)
rec, _ = train_run(spec, task, cfg)
out["rb_mts"] = [(r.step, r.accuracy) for r in rec if r.split == "eval"]
print("rb_mts", out["rb_mts"], flush=True)

# 2) criterion-4 MLP trajectory probe: 20k of 200k steps
task = task_defaults("icl_regression", seed=0)
spec = ModelSpec("mlp", depth=4, width=512, input_length=9, token_depth=9, output_dim=1)
cfg = TrainConfig(max_steps=20000, eval_every=2000, batch_size=128, seed=0, eval_episodes=1024)
rec, _ = train_run(spec, task, cfg)
out["mlp_c4"] = [(r.step, round(r.mse, 4)) for r in rec if r.split == "unrestricted_eval"]
print("mlp_c4", out["mlp_c4"], flush=True)

# 3) mixer probe
spec = ModelSpec("mixer", depth=4, width=128, channel_width=64, input_length=9, token_depth=9, output_dim=1)
cfg = TrainConfig(max_steps=4000, eval_every=500, batch_size=128, seed=0, eval_episodes=1024)
rec, _ = train_run(spec, task, cfg)
out["mixer_c4"] = [(r.step, round(r.mse, 4)) for r in rec if r.split == "unrestricted_eval"]
print("mixer_c4", out["mixer_c4"], flush=True)

# 4) transformer probe
spec = ModelSpec("transformer", depth=4, width=128, input_length=9, token_depth=9, output_dim=1)
cfg = TrainConfig(max_steps=6000, eval_every=1000, batch_size=128, seed=0, eval_episodes=1024)
rec, _ = train_run(spec, task, cfg)
out["tf_c4"] = [(r.step, round(r.mse, 4)) for r in rec if r.split == "unrestricted_eval"]
print("tf_c4", out["tf_c4"], flush=True)

print("total", round(time.time()-t0, 1), "s")
json.dump(out, open("/root/pkg/.probe/probe1.json", "w"), indent=1)
