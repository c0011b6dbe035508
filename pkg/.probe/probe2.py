import time
import numpy as np
from icllab.models import ModelSpec
from icllab.taskgen import task_defaults
from icllab.trainer import TrainConfig, train_run, default_eval_protocol, ood_split

T0 = time.time()
def log(*a):
    print(f"[{time.time()-T0:7.0f}s]", *a, flush=True)

def run(tag, spec, task, steps, eval_every, splits=None, metric=None, lr=1e-4):
    cfg = TrainConfig(max_steps=steps, eval_every=eval_every, batch_size=128,
                      lr=lr, seed=0, eval_episodes=512)
    protocol = None
    if splits == "ood_sphere":
        task2 = task
        protocol = default_eval_protocol(task2) + [
            ood_split(task2, f"d={d}", d=float(d)) for d in (8, 12, 16)]
    rec, _ = train_run(spec, task, cfg, eval_protocol=protocol,
                       metric_set=metric, run_id=tag)
    by_split = {}
    for r in rec:
        if r.split != "train":
            by_split.setdefault(r.split, []).append(
                (r.step, round(r.loss, 4), None if r.accuracy is None else round(r.accuracy, 3)))
    for s, v in by_split.items():
        log(tag, s, v[-6:])
    return rec

# --- criterion 6 probe: transition sizes
task = task_defaults("icl_regression", pool_size=4096, seed=0)
spec = ModelSpec("mlp", depth=2, width=256, input_length=9, token_depth=9, output_dim=1)
run("c6-k4096-mlp2x256", spec, task, 60000, 10000)

task = task_defaults("icl_regression", pool_size=2, seed=0)
run("c6-k2-mlp2x256", spec, task, 20000, 5000)

# --- criterion 7 probe: classification three archs at k=2048
task = task_defaults("icl_classification", seed=0)  # k=2048 B=4 L=8 C=32
mlp = ModelSpec("mlp", depth=4, width=256, input_length=17, token_depth=8, output_dim=32)
run("c7-mlp4x256", mlp, task, 24000, 4000)
mixer = ModelSpec("mixer", depth=2, width=64, channel_width=64, input_length=17, token_depth=8, output_dim=32)
run("c7-mixer2x64", mixer, task, 10000, 2000)
tf = ModelSpec("transformer", depth=2, width=64, input_length=17, token_depth=8, output_dim=32)
run("c7-tf2x64", tf, task, 8000, 2000)
task16 = task_defaults("icl_classification", pool_size=16, seed=0)
run("c7-k16-mlp", mlp, task16, 12000, 3000)

# --- criterion 5 probe: mixer context lengths + mlp failure
for L, steps in ((64, 20000), (256, 12000)):
    task = task_defaults("icl_regression", context_length=L, seed=0)
    spec = ModelSpec("mixer", depth=2, width=64, channel_width=32,
                     input_length=L + 1, token_depth=9, output_dim=1)
    run(f"c5-mixer-L{L}", spec, task, steps, steps // 6)
task = task_defaults("icl_regression", context_length=256, seed=0)
spec = ModelSpec("mlp", depth=2, width=256, input_length=257, token_depth=9, output_dim=1)
run("c5-mlp-L256", spec, task, 12000, 3000)

# --- criterion 13 probe: simple regression n=64
task = task_defaults("simple_regression", seed=0)  # n=64, t=1
mlp = ModelSpec("mlp", depth=2, width=128, input_length=64, token_depth=1, output_dim=1)
run("c13-mlp", mlp, task, 8000, 1000)
tf1 = ModelSpec("transformer", depth=2, width=32, input_length=64, token_depth=1,
                output_dim=1, use_positional_encoding=True)
run("c13-tf-t1", tf1, task, 20000, 2500)
task64 = task_defaults("simple_regression", chunk_size=64, seed=0)
tf64 = ModelSpec("transformer", depth=2, width=32, input_length=1, token_depth=64,
                 output_dim=1, use_positional_encoding=True)
run("c13-tf-t64", tf64, task64, 20000, 2500)

# --- criterion 8 probe: relational tasks three archs
for kind, L_in in (("mts", 6), ("sphere_oddball", 6)):
    task = task_defaults(kind, seed=0)
    out = 5 if kind == "mts" else 6
    mlp = ModelSpec("mlp", depth=2, width=64, input_length=L_in, token_depth=2, output_dim=out)
    run(f"c8-{kind}-mlp", mlp, task, 8000, 1000)
    tf = ModelSpec("transformer", depth=2, width=32, input_length=L_in, token_depth=2,
                   output_dim=out, use_positional_encoding=True)
    run(f"c8-{kind}-tf", tf, task, 8000, 1000)
    rb = ModelSpec("rb_mlp", depth=1, width=1, input_length=L_in, token_depth=2,
                   output_dim=out, rb_centered=(kind != "mts"))
    run(f"c8-{kind}-rb", rb, task, 30000, 5000)

# --- criterion 9: sphere mlp with OOD splits + logit metric
task = task_defaults("sphere_oddball", seed=0)
mlp = ModelSpec("mlp", depth=2, width=64, input_length=6, token_depth=2, output_dim=6)
run("c9-sphere-mlp-ood", mlp, task, 8000, 2000, splits="ood_sphere",
    metric=("loss", "accuracy", "mean_target_logit"))

# --- criterion 10: line oddball rb pair at d=2
task = task_defaults("line_oddball", seed=0)
rb_s = ModelSpec("rb_mlp", depth=1, width=1, input_length=6, token_depth=2, output_dim=6)
run("c10-line-rb-shallow", rb_s, task, 20000, 5000)
rb_d = ModelSpec("rb_mlp_deep", depth=1, width=256, input_length=6, token_depth=2, output_dim=6)
run("c10-line-rb-deep", rb_d, task, 8000, 2000)

# --- criterion 11: same-different
task = task_defaults("same_different", num_symbols=64, seed=0)
sd = ModelSpec("mlp", depth=4, width=256, input_length=2, token_depth=64,
               output_dim=2, embed_width=256)
run("c11-sd-64", sd, task, 10000, 2500)
task = task_defaults("same_different", num_symbols=8192, seed=0)
sd = ModelSpec("mlp", depth=4, width=256, input_length=2, token_depth=8192,
               output_dim=2, embed_width=256)
run("c11-sd-8192-probe", sd, task, 4000, 1000)
log("ALL PROBES DONE")
