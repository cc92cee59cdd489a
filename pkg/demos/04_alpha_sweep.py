"""alpha_train x alpha_test grid; accuracy should be best near the diagonal."""

import numpy as np

from proxytune import sweep as S

spec = S.SweepSpec(
    dataset={"kind": "blobs_shifted", "n_classes": 4, "shift": 3.0},
    models={"small": {"name": "mlp", "hidden": [16]}},
    train={"epochs": 20, "learning_rate": 1e-2},
)
grid = S.run_sweep(spec)

# rows: alpha_train, columns: alpha_test
print("      " + " ".join(f"{a:5.1f}" for a in grid.alpha_test))
for a, row in zip(grid.alpha_train, grid.accuracy):
    print(f"{a:5.1f} " + " ".join(f"{v:5.3f}" for v in row))

near, far, dom = S.diagonal_dominance(grid, near=0.2, far=1.0)
print(f"near-diagonal mean {near:.4f}, far mean {far:.4f}, dominance={dom}")

# every cell of a row was scored with one tuned checkpoint per seed
print(len(set(grid.digests.values())), "distinct tuned checkpoints for",
      np.size(grid.accuracy), "cells")
S.emit_grid_csv(grid, "grid.csv")
