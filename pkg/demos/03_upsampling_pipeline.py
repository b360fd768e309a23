"""Loss-trajectory upsampling on a dataset with a known hard group.

Half the tasks use the strongest eigen-direction e_1, the other half the
weakest one e_d.  A small proxy model is trained on the data, per-example
losses are recorded at a few checkpoints, and two-means on
log(loss / initial loss) separates the slow learners.  The hard cluster is
then duplicated.

    python demos/03_upsampling_pipeline.py
"""

import math

import numpy as np

from sblab.optimizers import OptimizerConfig
from sblab.spectra import geometric_spectrum, sample_structured_tasks
from sblab.upsampler import ProxyConfig, apply_plan, build_plan, collect_proxy_trajectories, kmeans2

spec = geometric_spectrum(4, gamma=0.5)
n_ctx = 32
rng = np.random.default_rng(0)
data, groups = sample_structured_tasks(
    spec, n_ctx, 1000, rng, mixture=[0.5, 0, 0, 0.5], weight_scale=math.sqrt(2), magnitude="sign"
)
is_weak = groups == 3

proxy = ProxyConfig(
    OptimizerConfig(kind="gd", learning_rate=0.2, steps=30_000, grad_mode="empirical", eval_size=1),
    n_heads=2,
    init_scale=3e-3,
)
trajs = collect_proxy_trajectories(data, spec, n_ctx, proxy, 8, rng, include_initial=True)

for transform in ("none", "log_relative"):
    a = kmeans2(trajs, "trajectory", seed=0, transform=transform)
    print(f"{transform:12s} hard cluster holds {a.hard_mask[is_weak].mean():.1%} of the e_d tasks "
          f"and {a.hard_mask[~is_weak].mean():.1%} of the e_1 tasks")

# raw losses are dominated by per-example scale; normalizing by the initial loss
# leaves only how fast each example is learned
plan = build_plan(kmeans2(trajs, "trajectory", seed=0, transform="log_relative"), factor=2.0)
print("plan counts", plan.counts, "effective size", plan.effective_size)
upsampled = apply_plan(data, plan)
print("dataset size before / after:", len(data), len(upsampled))
