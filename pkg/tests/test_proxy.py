import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from proxytune import diffcore as dc
from proxytune.diffcore import Tape
from proxytune.errors import ConfigError
from proxytune.models import MlpClassifier, ModelHandle, Role
from proxytune.proxy import (AlphaPair, ProxyTriple, cpt_loss, ensemble_logits,
                             proxy_predict, vanilla_proxy_config)

from conftest import make_triple

# logistic values from mpmath at 40 digits
NEG_LOG_SIGMOID_1 = 0.3132616875182228340
SIGMOID_3 = 0.9525741268224332191
SIGMOID_MINUS_3 = 0.04742587317756678088


class FixedLogits:
    """Stand-in frozen evaluator that returns the same logits for any input."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)

    def __call__(self, X):
        X = np.asarray(X)
        return self.z.copy() if X.ndim == 1 else np.tile(self.z, (X.shape[0], 1))


def fixed_triple(z_t, z_l, z_s):
    C = len(z_t)
    tuned = MlpClassifier([1, C])
    tuned.set_params({"W0": np.zeros((1, C)), "b0": np.asarray(z_t, float)})
    small = ModelHandle(FixedLogits(z_s), Role.FROZEN_SMALL, 1, C)
    large = ModelHandle(FixedLogits(z_l), Role.FROZEN_LARGE, 1, C)
    return ProxyTriple(tuned, small, large)


def test_ensemble_examples():
    assert ensemble_logits([1, 2], [0, 0], [0, 0], 1.0).values.tolist() == [1, 2]
    e = ensemble_logits([0.5, 0.5], [2, 0], [1, 1], 1.0)
    assert e.values.tolist() == [1.5, -0.5] and e.alpha_used == 1.0
    z = np.array([0.3, -7.1, 2.2])
    assert np.array_equal(ensemble_logits(z, [9, 9, 1], [-4, 0, 2], 0.0).values, z)


def test_ensemble_errors():
    with pytest.raises(dc.ShapeMismatch):
        ensemble_logits([1, 2], [1, 2, 3], [1, 2], 1.0)
    with pytest.raises(dc.NonFinite):
        ensemble_logits([1, np.inf], [1, 2], [1, 2], 1.0)
    with pytest.raises(dc.NonFinite):
        ensemble_logits([1, 2], [1, 2], [1, 2], np.nan)


vec3 = arrays(np.float64, 3, elements=st.floats(-10, 10))


@given(vec3, vec3, vec3, vec3, st.floats(0, 4), st.floats(0, 4))
def test_ensemble_linearity(a, b, c, d, s, t):
    f = lambda zt, zl, zs, al: ensemble_logits(zt, zl, zs, al).values
    np.testing.assert_allclose(f(a + d, b, c, s), f(a, b, c, s) + d, atol=1e-9)
    np.testing.assert_allclose(f(a, b + d, c, s), f(a, b, c, s) + s * d, atol=1e-9)
    np.testing.assert_allclose(f(a, b, c + d, s), f(a, b, c, s) - s * d, atol=1e-9)
    np.testing.assert_allclose(f(a, b, c, s + t) - f(a, b, c, s), t * (b - c), atol=1e-9)


def test_alpha_pair_validation():
    assert vanilla_proxy_config() == AlphaPair(0.0, 1.0)
    assert AlphaPair(1.2, 0.4).consistency_gap == pytest.approx(0.8)
    for bad in (-0.1, np.inf, np.nan):
        with pytest.raises(ConfigError):
            AlphaPair(bad, 1.0)
        with pytest.raises(ConfigError):
            AlphaPair(1.0, bad)


def test_cpt_loss_scalar_oracle():
    tri = fixed_triple([0.0, 0.0], [1.0, 0.0], [0.0, 0.0])
    loss, _ = cpt_loss(tri, [0.0], 0, 1.0)
    assert loss.item() == pytest.approx(NEG_LOG_SIGMOID_1, rel=1e-14)


def test_cpt_loss_alpha_zero_is_plain_cross_entropy_bitwise():
    tri = make_triple()
    rng = np.random.default_rng(0)
    X = rng.normal(size=(7, 3))
    y = rng.integers(0, 4, 7)
    plain = dc.cross_entropy(tri.tuned.model.logits(X), y)
    loss, _ = cpt_loss(tri, X, y, 0.0)
    assert loss.data.tobytes() == plain.data.tobytes()


def test_cpt_loss_identical_frozen_models_cancel():
    tri = make_triple(same_frozen=True)
    X = np.random.default_rng(1).normal(size=(5, 3))
    y = np.array([0, 1, 2, 3, 0])
    plain = dc.cross_entropy(tri.tuned.model.logits(X), y).item()
    for a in (0.0, 0.4, 1.0, 3.7):
        assert cpt_loss(tri, X, y, a)[0].item() == plain
        p, k = proxy_predict(tri, X, a)
        np.testing.assert_allclose(p, dc.softmax(tri.tuned(X)), atol=1e-12, rtol=0)


def test_cpt_loss_rejects_bad_inputs(triple):
    with pytest.raises(dc.IndexOutOfRange):
        cpt_loss(triple, np.zeros(3), 4, 1.0)
    with pytest.raises(dc.ShapeMismatch):
        cpt_loss(triple, np.zeros(2), 0, 1.0)
    with pytest.raises(ConfigError):
        cpt_loss(triple, np.zeros(3), 0, -1.0)


def test_gradient_only_for_tuned_parameters(triple):
    tape = Tape()
    loss, leaves = cpt_loss(triple, np.ones((2, 3)), np.array([1, 2]), 1.0, tape=tape)
    grads = tape.backward(loss)
    assert set(grads) == {id(t) for t in leaves.values()}
    assert set(leaves) == set(triple.tuned.model.params)


def test_gradient_wrt_tuned_logits_is_softmax_minus_onehot():
    # linear tuned model with W=0: logits == bias, so dL/db == dL/dz_tuned
    z_t, z_l, z_s = np.array([0.2, -0.4, 1.1]), np.array([1.0, 0.5, -2.0]), np.array([0.3, 0.3, 0.0])
    tri = fixed_triple(z_t, z_l, z_s)
    tape = Tape()
    loss, leaves = cpt_loss(tri, [0.0], 1, 0.7, tape=tape)
    g = tape.backward(loss)[id(leaves["b0"])]
    expected = dc.softmax(z_t + 0.7 * (z_l - z_s)) - np.array([0, 1, 0])
    np.testing.assert_allclose(g, expected, atol=1e-15)
    num = dc.numerical_grad(
        lambda b: dc.cross_entropy(b + 0.7 * (z_l - z_s), 1).item(), z_t)
    assert dc.grad_rel_error(g, num) < 1e-5


def test_proxy_predict_oracle():
    tri = fixed_triple([0.0, 0.0], [3.0, 0.0], [0.0, 0.0])
    p, k = proxy_predict(tri, [0.0], 1.0)
    np.testing.assert_allclose(p, [SIGMOID_3, SIGMOID_MINUS_3], rtol=1e-14)
    assert k == 0


def test_proxy_predict_alpha_zero_is_tuned_model(triple):
    X = np.random.default_rng(2).normal(size=(9, 3))
    p, k = proxy_predict(triple, X, 0.0)
    assert np.array_equal(k, np.argmax(triple.tuned(X), axis=1))


def test_argmax_tie_breaks_to_lowest_index():
    tri = fixed_triple([1.0, 1.0, 1.0], [0.0, 2.0, 2.0], [0.0, 0.0, 0.0])
    assert proxy_predict(tri, [0.0], 1.0)[1] == 1
    assert proxy_predict(tri, [0.0], 0.0)[1] == 0


@settings(max_examples=200)
@given(vec3, vec3, vec3, st.floats(0, 4), st.sampled_from([-5.0, 0.1, 100.0]), st.integers(0, 2))
def test_shift_invariance_of_decisions(zt, zl, zs, a, c, which):
    base = [zt, zl, zs]
    shifted = [z.copy() for z in base]
    shifted[which] = shifted[which] + c
    p0 = dc.softmax(ensemble_logits(*base, a).values)
    p1 = dc.softmax(ensemble_logits(*shifted, a).values)
    np.testing.assert_allclose(p1, p0, atol=1e-12, rtol=0)


def test_log_softmax_option_changes_offset_only():
    tri = make_triple()
    alt = ProxyTriple(tri.tuned, tri.frozen_small, tri.frozen_large, log_softmax_inputs=True)
    X = np.ones((2, 3))
    zl, zs = tri.frozen_large(X), tri.frozen_small(X)
    np.testing.assert_allclose(alt.offset(X), dc.log_softmax(zl) - dc.log_softmax(zs))
    assert np.array_equal(tri.offset(X), zl - zs)
