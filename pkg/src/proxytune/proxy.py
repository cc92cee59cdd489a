"""Logit ensembling for proxy-tuned black-box models.

The tuned small model's logits are shifted by a scaled offset between the
frozen large model and the frozen (untuned) small model::

    p(x) = z_tuned + alpha * (z_large - z_small_pre)

Training under this ensemble with ``alpha_train`` and predicting with
``alpha_test`` gives consistent proxy tuning; ``(0, 1)`` is vanilla
proxy-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import NonFinite, ShapeMismatch, Tape, Tensor
from .errors import ConfigError
from .models import ModelHandle, Role, TunableHandle


@dataclass(frozen=True)
class AlphaPair:
    alpha_train: float
    alpha_test: float

    def __post_init__(self):
        for name in ("alpha_train", "alpha_test"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")

    @property
    def consistency_gap(self) -> float:
        return abs(self.alpha_train - self.alpha_test)


def vanilla_proxy_config() -> AlphaPair:
    """Untouched fine-tuning, full offset at inference."""
    return AlphaPair(0.0, 1.0)


@dataclass(frozen=True)
class EnsembledLogits:
    values: np.ndarray
    alpha_used: float


class ProxyTriple:
    """Tuned model plus the two frozen logit sources it is ensembled with.

    Output spaces (and input dims) must agree; this is checked here so a
    mismatched pairing never reaches training.
    """

    def __init__(self, tuned, frozen_small: ModelHandle, frozen_large: ModelHandle,
                 log_softmax_inputs: bool = False):
        if not isinstance(tuned, TunableHandle):
            tuned = TunableHandle(tuned)
        if frozen_small.role is not Role.FROZEN_SMALL:
            raise ConfigError(f"frozen_small has role {frozen_small.role}")
        if frozen_large.role is not Role.FROZEN_LARGE:
            raise ConfigError(f"frozen_large has role {frozen_large.role}")
        dims = {tuned.output_dim, frozen_small.output_dim, frozen_large.output_dim}
        if len(dims) != 1:
            raise ShapeMismatch(
                f"output spaces differ: tuned={tuned.output_dim}, "
                f"small={frozen_small.output_dim}, large={frozen_large.output_dim}")
        ins = {tuned.input_dim, frozen_small.input_dim, frozen_large.input_dim}
        if len(ins) != 1:
            raise ShapeMismatch(f"input dims differ: {sorted(ins)}")
        self.tuned = tuned
        self.frozen_small = frozen_small
        self.frozen_large = frozen_large
        self.log_softmax_inputs = log_softmax_inputs

    @property
    def n_classes(self) -> int:
        return self.tuned.output_dim

    @property
    def input_dim(self) -> int:
        return self.tuned.input_dim

    def with_tuned(self, model) -> "ProxyTriple":
        return ProxyTriple(model, self.frozen_small, self.frozen_large, self.log_softmax_inputs)

    def offset(self, x) -> np.ndarray:
        """``z_large - z_small_pre`` for one input or a batch."""
        zl, zs = self.frozen_large(x), self.frozen_small(x)
        if self.log_softmax_inputs:
            zl, zs = dc.log_softmax(zl), dc.log_softmax(zs)
        return zl - zs


def _check_logits(*zs) -> None:
    shape = np.shape(zs[0])
    for z in zs:
        if np.shape(z) != shape:
            raise ShapeMismatch(f"logit shapes differ: {[np.shape(v) for v in zs]}")
        if not np.all(np.isfinite(z)):
            raise NonFinite("non-finite logits")
    if len(shape) == 0 or shape[-1] < 2:
        raise ShapeMismatch("need at least 2 classes")


def ensemble_logits(z_tuned, z_large, z_small_pre, alpha: float) -> EnsembledLogits:
    z_tuned, z_large, z_small_pre = (np.asarray(z, dtype=np.float64)
                                     for z in (z_tuned, z_large, z_small_pre))
    _check_logits(z_tuned, z_large, z_small_pre)
    if not math.isfinite(alpha):
        raise NonFinite(f"alpha={alpha}")
    return EnsembledLogits(z_tuned + alpha * (z_large - z_small_pre), float(alpha))


def ensemble_with_offset(z_tuned, offset, alpha: float):
    """Same arithmetic as :func:`ensemble_logits` given a precomputed offset.

    ``z_tuned`` may be a tracked Tensor; the offset is always a constant.
    """
    if isinstance(z_tuned, Tensor):
        return dc.add_const(z_tuned, alpha * offset)
    return z_tuned + alpha * offset


def cpt_loss(triple: ProxyTriple, x, y, alpha_train: float,
             tape: Tape | None = None, offset: np.ndarray | None = None):
    """Cross-entropy of the three-model ensemble against ``y``.

    Differentiates through the tuned model only. Returns ``(loss, leaves)``
    where ``leaves`` maps tuned parameter names to tape leaves; call
    ``tape.backward(loss)`` for gradients. ``offset`` may be supplied from a
    cache of frozen logits; it must equal ``triple.offset(x)``.
    """
    tape = tape if tape is not None else Tape()
    model = triple.tuned.model
    leaves = {k: tape.watch(v) for k, v in model.params.items()}
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z_t = model.forward(X, leaves)
    if offset is None:
        offset = triple.offset(X)
    offset = np.asarray(offset, dtype=np.float64).reshape(z_t.shape)
    if alpha_train < 0 or not math.isfinite(alpha_train):
        raise ConfigError(f"alpha_train must be finite and >= 0, got {alpha_train}")
    return dc.cross_entropy(ensemble_with_offset(z_t, offset, alpha_train), y), leaves


def proxy_logits(triple: ProxyTriple, x, alpha_test: float,
                 offset: np.ndarray | None = None) -> np.ndarray:
    z_t = triple.tuned(x)
    if offset is None:
        offset = triple.offset(x)
    return ensemble_with_offset(z_t, offset, alpha_test)


def argmax_lowest(p: np.ndarray) -> np.ndarray | int:
    """Argmax with ties going to the lowest class index."""
    out = np.argmax(p, axis=-1)  # numpy already returns the first maximum
    return int(out) if np.ndim(out) == 0 else out


def proxy_predict(triple: ProxyTriple, x, alpha_test: float,
                  offset: np.ndarray | None = None):
    """Class probabilities and predicted class(es) of the proxied black box."""
    p = dc.softmax(proxy_logits(triple, x, alpha_test, offset))
    return p, argmax_lowest(p)
