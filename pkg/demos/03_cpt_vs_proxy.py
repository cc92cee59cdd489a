"""Plain fine-tuning + ensembling vs training under the ensemble, on shifted blobs.

Takes around 10 seconds.
"""

from proxytune import sweep as S

spec = S.SweepSpec(
    seeds=(0, 1, 2, 3, 4),
    dataset={"kind": "blobs_shifted", "n_classes": 4, "shift": 3.0},
    models={"small": {"name": "mlp", "hidden": [16]}},
    train={"epochs": 20, "learning_rate": 1e-2},
)
report = S.compare(spec)
print(report.to_text())

# the same comparison when the downstream task sits far from the broad data
moons = S.spec_with(spec, dataset={"kind": "moons_shifted", "shift": 1.0})
print(S.compare(moons).to_text())
