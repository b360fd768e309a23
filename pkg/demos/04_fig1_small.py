"""A small version of the three-arm comparison: GD, SAM, and GD on an upsampled dataset.

Three seeds instead of 25, so it finishes in a few minutes.  For each run we
detect the loss drops (one per learned feature), convert them to learning
times and compute the entropy of the normalized times.  Higher entropy means
the features were learned at more similar times, i.e. less simplicity bias.

    python demos/04_fig1_small.py [out_dir]
"""

import sys

from sblab.experiments import RunConfig, run_fig1

cfg = RunConfig.from_dict({"run_id": "fig1_small", "seeds": [0, 1, 2]})
summary = run_fig1(cfg, out_dir=sys.argv[1] if len(sys.argv) > 1 else "out")

for arm, row in summary["arms"].items():
    print(f"\n{arm}")
    for r in row["runs"]:
        ent = r["entropy"]["entropy"] if r["entropy"] else float("nan")
        print(f"  seed {r['seed']}: drops at {r['drop_steps']}  entropy {ent:.3f}  test loss {r['final_test_loss']:.5f}")
    print(f"  median entropy {row['median_entropy']:.3f}  median test loss {row['median_test_loss']:.5f}")

print("\nchecks", summary["checks"])
