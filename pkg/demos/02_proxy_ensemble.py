"""How the three logit sources combine at inference."""

import numpy as np

from proxytune import diffcore as dc
from proxytune.proxy import ensemble_logits

z_tuned = np.array([1.0, 0.0, 0.0])   # small model after tuning
z_large = np.array([0.0, 2.0, 0.0])   # black box, logits only
z_small = np.array([0.0, 1.0, 0.0])   # small model before tuning

for alpha in (0.0, 0.5, 1.0, 2.0):
    p = dc.softmax(ensemble_logits(z_tuned, z_large, z_small, alpha).values)
    print(f"alpha={alpha:3.1f}  probs={np.round(p, 4)}  argmax={int(np.argmax(p))}")

# adding a constant to any one source changes nothing after softmax
p0 = dc.softmax(ensemble_logits(z_tuned, z_large, z_small, 1.0).values)
p1 = dc.softmax(ensemble_logits(z_tuned, z_large + 100.0, z_small, 1.0).values)
print("max diff after shift:", np.abs(p0 - p1).max())
