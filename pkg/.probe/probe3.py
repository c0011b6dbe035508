import time
from icllab.models import ModelSpec
from icllab.taskgen import task_defaults
from icllab.trainer import TrainConfig, train_run

T0 = time.time()
def log(*a): print(f"[{time.time()-T0:7.0f}s]", *a, flush=True)

task = task_defaults("icl_regression", pool_size=4096, seed=0)
candidates = [
    ("mlp4x256", ModelSpec("mlp", depth=4, width=256, input_length=9, token_depth=9, output_dim=1), 80000),
    ("mlp2x512", ModelSpec("mlp", depth=2, width=512, input_length=9, token_depth=9, output_dim=1), 80000),
]
for tag, spec, steps in candidates:
    cfg = TrainConfig(max_steps=steps, eval_every=10000, batch_size=128, seed=0, eval_episodes=1024)
    rec, _ = train_run(spec, task, cfg, run_id=tag)
    for split in ("finite_eval", "unrestricted_eval"):
        vals = [(r.step, round(r.loss, 4)) for r in rec if r.split == split]
        log(tag, split, vals)
log("PROBE3 DONE")

# classification plateau escape probe
task = task_defaults("icl_classification", seed=0)
spec = ModelSpec("mlp", depth=4, width=256, input_length=17, token_depth=8, output_dim=32)
cfg = TrainConfig(max_steps=90000, eval_every=10000, batch_size=128, seed=0, eval_episodes=512)
rec, _ = train_run(spec, task, cfg, run_id="c7-mlp4x256-long")
for split in ("novel_clusters", "swapped_labels"):
    vals = [(r.step, round(r.loss, 3), round(r.accuracy, 3)) for r in rec if r.split == split]
    log("c7-mlp4x256-long", split, vals)
trains = [(r.step, round(r.loss, 3)) for r in rec if r.split == "train"]
log("c7-mlp4x256-long train", trains[-5:])
log("PROBE3B DONE")

# context-length mixer variant: wider mixer at L=64, compare wall-time to low MSE
task = task_defaults("icl_regression", context_length=64, seed=0)
spec = ModelSpec("mixer", depth=2, width=128, channel_width=64,
                 input_length=65, token_depth=9, output_dim=1)
cfg = TrainConfig(max_steps=12000, eval_every=2000, batch_size=128, seed=0, eval_episodes=512)
rec, _ = train_run(spec, task, cfg, run_id="c5-mixer128-L64")
log("c5-mixer128-L64", [(r.step, round(r.loss, 4)) for r in rec if r.split == "unrestricted_eval"])
log("PROBE3C DONE")
