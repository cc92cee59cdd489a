"""Tape autodiff on a tiny MLP, checked against finite differences."""

import numpy as np

from proxytune import diffcore as dc
from proxytune.models import MlpClassifier

m = MlpClassifier([3, 5, 2], seed=0)
x = np.array([[0.5, -1.0, 2.0], [1.5, 0.2, -0.3]])
y = np.array([1, 0])

# only parameters registered with watch() get gradients
tape = dc.Tape()
leaves = {k: tape.watch(v) for k, v in m.params.items()}
loss = dc.cross_entropy(m.forward(x, leaves), y)
grads = tape.backward(loss)
print("loss", loss.item())

for name, leaf in leaves.items():
    def f(p, name=name):
        w = dict(m.params, **{name: p})
        return dc.cross_entropy(m.forward(x, {k: dc.Tensor(v) for k, v in w.items()}), y).item()
    num = dc.numerical_grad(f, m.params[name])
    print(f"{name:3s} rel err {dc.grad_rel_error(grads[id(leaf)], num):.1e}")

# softmax/cross-entropy stay finite for extreme logits
print(dc.cross_entropy(np.array([1000.0, -1000.0]), 1).item())
