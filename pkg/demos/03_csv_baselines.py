"""Score every estimator on CSV datasets.

Writes two simulated realizations in the loader's CSV format (``x1..xd``,
``t``, ``y`` and the optional ground-truth columns ``mu0``, ``mu1``, ``y0``,
``y1``), then evaluates the network with lambda selected on validation loss,
its unregularized twin, the partially linear ratio estimator and the linear
and difference-in-means baselines. Any file in the same format, such as an
IHDP realization converted to these column names, works the same way.

    python demos/03_csv_baselines.py
"""

from pathlib import Path

from donut import DESK_TRAIN_CONFIG, ExperimentSpec, SimSpec, run_csv_eval, simulate, write_csv

root = Path("demo_runs/csv")
root.mkdir(parents=True, exist_ok=True)
paths = []
for seed in (1, 2):
    path = root / f"realization_{seed}.csv"
    write_csv(simulate(SimSpec(n_control=300, n_treated=600, seed=seed).with_kl(2.0)), path)
    paths.append(str(path))

spec = ExperimentSpec("csv_eval", replications=1, train_cfg=DESK_TRAIN_CONFIG, data_paths=tuple(paths))
result = run_csv_eval(spec)

print(f"{'method':<15} {'in-sample':>10} {'out-of-sample':>14}")
for method in spec.methods:
    vin = result.values("csv", method, "eps_ate_mu/in_sample").mean()
    vout = result.values("csv", method, "eps_ate_mu/out_sample").mean()
    print(f"{method:<15} {vin:>10.4f} {vout:>14.4f}")
print("\nselected lambda per file:", result.values("csv", "donut", "selected_lambda").tolist())
