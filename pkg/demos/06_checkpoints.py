"""Saving and reloading a trained model; logits come back bit for bit."""

import os
import tempfile

import numpy as np

from proxytune import data as D
from proxytune.models import MlpClassifier, load_checkpoint, save_checkpoint
from proxytune.trainer import TrainConfig, pretrain

broad, _, _ = D.gen_blobs_shifted(0, n_classes=3, input_dim=2, n_per_class=50, shift=2.0)
ck = pretrain(MlpClassifier([2, 8, 3], seed=0), broad, TrainConfig(epochs=5, learning_rate=1e-2))
print(ck.report.to_text())

path = os.path.join(tempfile.mkdtemp(), "small.ckpt")
save_checkpoint(ck, path)
back = load_checkpoint(path)
X = np.random.default_rng(0).normal(size=(100, 2))
print("same logits:", np.array_equal(back.to_model().logits(X), ck.to_model().logits(X)))
print("digest", back.digest()[:16], back.metadata["kind"], back.metadata["epochs"], "epochs")

# a flipped byte is caught on load
raw = bytearray(open(path, "rb").read())
raw[-3] ^= 0xFF
open(path, "wb").write(bytes(raw))
try:
    load_checkpoint(path)
except Exception as e:
    print(type(e).__name__, e)
