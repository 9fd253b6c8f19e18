import numpy as np
import pytest

from mergeguard.activations import Kind
from mergeguard.data import LabeledImageSet
from mergeguard.errors import TrainingError
from mergeguard.layers import Dense, Flatten, Model, ParametricActivation, mlp
from mergeguard.merge import finalize_merge, find_mergeable_blocks
from mergeguard.rng import make_rng
from mergeguard.training import clip_gradients, composite_loss, linearity_penalty, train


def _toy(rng, n=64, d=5, classes=3):
    x = rng.standard_normal((n, 1, 1, d)).astype(np.float32)
    y = rng.integers(0, classes, n)
    return LabeledImageSet(x, y, classes)


def _numpy_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def test_loss_decomposition_matches_independent_terms(rng):
    m = mlp([6, 8, 7, 3], rng, input_shape=(6,))
    acts = [a for _, a in m.activations()]
    for a, v in zip(acts, (0.2, 0.6)):
        a.unpin(v)
    x = rng.standard_normal((32, 6)).astype(np.float32)
    y = rng.integers(0, 3, 32)
    lam = 0.7
    total, ce, reg = composite_loss(m, x, y, lam, acts)
    ce_ref = _numpy_ce(m.logits(x).astype(np.float64), y)
    reg_ref = sum((1 - a.alpha) ** 2 for a in acts)
    assert float(ce.item()) == pytest.approx(ce_ref, abs=1e-5)
    assert float(reg.item()) == pytest.approx(reg_ref, abs=1e-6)
    assert float(total.item()) == pytest.approx(ce_ref + lam * reg_ref, abs=1e-5)


def test_history_loss_is_ce_plus_lambda_reg(rng):
    ds = _toy(rng)
    m = mlp([5, 6, 3], rng, input_shape=(1, 1, 5))
    act = m.activations()[0][1]
    act.unpin(0.1)
    h = train(m, ds, 3, 0.05, batch_size=16, lam=2.0, regularized=[act])
    for loss, ce, reg in zip(h.loss, h.ce, h.reg):
        assert loss == pytest.approx(ce + 2.0 * reg, abs=1e-5)


def test_penalty_logistic_and_direct_forms():
    a = ParametricActivation(Kind.PRELU)
    b = ParametricActivation(Kind.GELU)
    a.unpin(0.25)
    b.unpin(0.25)
    assert float(linearity_penalty([a, b]).item()) == pytest.approx(2 * 0.75 ** 2, rel=1e-6)


@pytest.mark.parametrize("parametrization", ["direct", "logistic"])
def test_alpha_rises_every_step_when_ce_is_blind_to_it(rng, parametrization):
    # pre-activations are all positive, so alpha never touches the forward pass
    d = 4
    first = Dense(np.eye(d, dtype=np.float32), np.full(d, 10.0, np.float32))
    act = ParametricActivation(Kind.PRELU, parametrization=parametrization)
    act.unpin(0.01)
    second = Dense(rng.standard_normal((3, d)).astype(np.float32), np.zeros(3, np.float32))
    m = Model([Flatten(), first, act, second], (1, 1, d), 3)
    ds = LabeledImageSet(rng.random((32, 1, 1, d)), rng.integers(0, 3, 32), 3)
    seen = [act.alpha]
    # one full batch per epoch, so the callback sees every step
    train(m, ds, 60, 0.05, batch_size=32, lam=1.0, regularized=[act],
          callback=lambda e, model, h: seen.append(act.alpha))
    saturated = next((i for i, v in enumerate(seen) if v >= 1.0 - 1e-7), len(seen))
    assert all(b > a for a, b in zip(seen[:saturated], seen[1:saturated]))
    if parametrization == "direct":
        assert saturated < len(seen)


def _frozen_backbone_block(rng):
    m = mlp([5, 16, 3], rng, input_shape=(1, 1, 5))
    act = find_mergeable_blocks(m)[0].activation
    act.unpin(0.01)
    return m, act


def test_huge_lambda_drives_alpha_to_one_and_merges(rng):
    m, act = _frozen_backbone_block(rng)
    train(m, _toy(rng), 20, 0.01, lam=1e4, regularized=[act], trainable={"2.raw_alpha"})
    assert act.alpha >= 0.99
    merged, records = finalize_merge(m)
    assert len(records) == 1


def test_zero_lambda_leaves_alpha_near_init(rng):
    m, act = _frozen_backbone_block(rng)
    train(m, _toy(rng), 20, 0.01, lam=0.0, regularized=[act])
    assert act.alpha < 0.5
    assert finalize_merge(m)[1] == []


def test_training_is_deterministic(rng):
    ds = _toy(rng)
    runs = []
    for _ in range(2):
        m = mlp([5, 6, 3], make_rng(0), input_shape=(1, 1, 5))
        train(m, ds, 2, 0.1, batch_size=8, seed=3)
        runs.append(m.layers[1].W.data.copy())
    np.testing.assert_array_equal(*runs)


def test_non_finite_loss_raises(rng):
    m = mlp([5, 6, 3], rng, input_shape=(1, 1, 5))
    ds = _toy(rng)
    ds.images[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError):
        train(m, ds, 1, 0.1)


def test_clip_gradients_scales_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_gradients(g, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.0])
    np.testing.assert_allclose(g["b"], [0.8])
    small = {"a": np.array([0.1])}
    clip_gradients(small, 1.0)
    np.testing.assert_array_equal(small["a"], [0.1])


def test_cosine_schedule_and_zero_epochs(rng):
    m = mlp([5, 6, 3], rng, input_shape=(1, 1, 5))
    before = m.layers[1].W.data.copy()
    h = train(m, _toy(rng), 0, 0.1, schedule="cosine")
    assert h.loss == []
    np.testing.assert_array_equal(m.layers[1].W.data, before)
    with pytest.raises(ValueError):
        train(m, _toy(rng), 1, 0.1, schedule="step")
