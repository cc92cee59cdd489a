"""Cosine-similarity classifier as the tuned model."""

import numpy as np

from proxytune import data as D
from proxytune.models import DualEncoderClassifier, ModelHandle, Role, cosine_logits
from proxytune.proxy import ProxyTriple
from proxytune.sweep import evaluate
from proxytune.trainer import TrainConfig, cpt_tune, pretrain

broad, train, test = D.gen_blobs_shifted(0, n_classes=4, input_dim=2, n_per_class=100, shift=3.0)
st = D.Standardizer.fit(broad)
broad, train, test = st(broad), st(train), st(test)

small = DualEncoderClassifier(2, [16], 8, 4, tau=0.1, seed=0)
large = DualEncoderClassifier(2, [64, 64], 8, 4, tau=0.1, seed=1)
cfg = TrainConfig(epochs=20, learning_rate=1e-2)
small_ck = pretrain(small, broad, cfg)
large_ck = pretrain(large, broad, cfg.replace(epochs=60))

# pre-temperature logits are cosines
u = small_ck.to_model().unit_logits(np.random.default_rng(0).normal(0, 50, (1000, 2)))
print("cosine range", u.min().round(3), u.max().round(3))

# rescaling the input embedding leaves the logits alone
f, g = np.random.default_rng(1).normal(size=(5, 8)), np.eye(4, 8)
print("scale effect", np.abs(cosine_logits(3.0 * f, g).data - cosine_logits(f, g).data).max())

triple = ProxyTriple(small_ck.to_model(),
                     ModelHandle.frozen(small_ck.to_model(), Role.FROZEN_SMALL),
                     ModelHandle.frozen(large_ck.to_model(), Role.FROZEN_LARGE))
tuned = cpt_tune(triple, train, cfg.replace(alpha_train=1.0))
print("test accuracy at alpha=1:", evaluate(triple.with_tuned(tuned.to_model()), test, 1.0))
