import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mergeguard.attacks import (
    Attack, PoisonSpec, apply_trigger, asr_eval_set, key_image, poison, poison_badnet,
    poison_blended, poison_sig, sig_signal,
)
from mergeguard.data import LabeledImageSet, split, synth_shapes
from mergeguard.errors import MetricError, SpecError
from mergeguard.layers import default_victim
from mergeguard.metrics import attack_success_rate, test_accuracy
from mergeguard.rng import make_rng
from mergeguard.training import train


@pytest.fixture(scope="module")
def shapes():
    return synth_shapes(1000, 4, seed=0)


def test_badnet_counts_and_labels(shapes):
    out = poison_badnet(shapes, PoisonSpec(poisoning_ratio=0.1, target_label=0))
    assert out.poisoned.sum() == 100
    assert np.all(out.labels[out.poisoned] == 0)
    np.testing.assert_array_equal(out.labels[~out.poisoned], shapes.labels[~out.poisoned])


def test_badnet_stamp_semantics(shapes):
    out = poison_badnet(shapes, PoisonSpec())
    i = np.flatnonzero(out.poisoned)[0]
    assert np.all(out.images[i, :, -3:, -3:] == 1.0)
    mask = np.ones((16, 16), bool)
    mask[-3:, -3:] = False
    np.testing.assert_array_equal(out.images[i, 0][mask], shapes.images[i, 0][mask])
    np.testing.assert_array_equal(out.images[~out.poisoned], shapes.images[~out.poisoned])


def test_ratio_zero_is_identity(shapes):
    out = poison_badnet(shapes, PoisonSpec(poisoning_ratio=0.0))
    assert not out.poisoned.any()
    np.testing.assert_array_equal(out.images, shapes.images)


@pytest.mark.parametrize("corner", ["top-left", "top-right", "bottom-left"])
def test_patch_corners(shapes, corner):
    x = apply_trigger(np.zeros((1, 1, 16, 16)), PoisonSpec(patch_corner=corner))
    rows = slice(0, 3) if corner.startswith("top") else slice(13, 16)
    cols = slice(0, 3) if corner.endswith("left") else slice(13, 16)
    assert x[0, 0, rows, cols].sum() == 9 and x.sum() == 9


def test_patch_out_of_bounds(shapes):
    with pytest.raises(SpecError):
        poison_badnet(shapes, PoisonSpec(patch_size=17))
    with pytest.raises(SpecError):
        poison_badnet(shapes, PoisonSpec(target_label=4))
    with pytest.raises(SpecError):
        PoisonSpec(poisoning_ratio=1.5)


def test_blended_extremes(shapes):
    spec0 = PoisonSpec(attack="blended", blend_weight=0.0)
    out = poison_blended(shapes, spec0)
    np.testing.assert_array_equal(out.images, shapes.images)
    assert np.all(out.labels[out.poisoned] == 0)
    spec1 = PoisonSpec(attack="blended", blend_weight=1.0)
    out = poison_blended(shapes, spec1)
    key = key_image(spec1, shapes.image_shape)
    np.testing.assert_array_equal(out.images[out.poisoned], np.broadcast_to(key, out.images[out.poisoned].shape))


def test_blended_key_dim_mismatch(shapes):
    with pytest.raises(SpecError):
        poison_blended(shapes, PoisonSpec(attack="blended"), key=np.zeros((1, 8, 8)))


def test_sig_is_clean_label(shapes):
    spec = PoisonSpec(attack="sig", poisoning_ratio=0.5, target_label=2)
    out = poison_sig(shapes, spec)
    np.testing.assert_array_equal(out.labels, shapes.labels)
    changed = np.any(out.images != shapes.images, axis=(1, 2, 3))
    assert not np.any(changed & (shapes.labels != 2))
    assert out.poisoned.sum() == math.floor(0.5 * np.sum(shapes.labels == 2))


def test_sig_zero_amplitude(shapes):
    out = poison_sig(shapes, PoisonSpec(attack="sig", sig_amplitude=0.0))
    np.testing.assert_array_equal(out.images, shapes.images)


def test_sig_peak_column():
    spec = PoisonSpec(attack="sig", sig_amplitude=0.1, sig_frequency=2)
    v = sig_signal(spec, 16, 16)
    assert v[0, 16 // (4 * 2)] == pytest.approx(0.1)  # sin(pi/2)
    assert np.all(v == v[0])


def test_sig_spec_validation(shapes):
    with pytest.raises(SpecError):
        poison_sig(shapes, PoisonSpec(attack="sig", sig_frequency=0))
    with pytest.raises(SpecError):
        poison_sig(shapes, PoisonSpec(attack="sig", sig_amplitude=1.0))


def test_wrong_entry_point(shapes):
    with pytest.raises(SpecError):
        poison_sig(shapes, PoisonSpec())
    with pytest.raises(SpecError):
        poison_badnet(shapes, PoisonSpec(attack="sig"))


@given(st.sampled_from(list(Attack)), st.floats(0, 1), st.integers(0, 100))
def test_pixel_range_and_idempotent_count(attack, ratio, seed):
    ds = synth_shapes(60, 3, seed=1)
    spec = PoisonSpec(attack=attack, poisoning_ratio=ratio, seed=seed, target_label=1)
    once = poison(ds, spec)
    twice = poison(once, spec)
    assert once.images.min() >= 0 and once.images.max() <= 1
    assert twice.images.min() >= 0 and twice.images.max() <= 1
    pool = len(ds) if attack is not Attack.SIG else np.sum(ds.labels == 1)
    assert twice.poisoned.sum() <= math.floor(ratio * pool + 1e-9)
    if attack is Attack.SIG:
        np.testing.assert_array_equal(twice.labels, ds.labels)
    else:
        assert np.all(twice.labels[twice.poisoned] == 1)


def test_asr_eval_set_excludes_target(shapes):
    s = asr_eval_set(shapes, PoisonSpec())
    assert np.all(s.labels != 0) and len(s) == np.sum(shapes.labels != 0)
    assert np.all(s.images[:, :, -3:, -3:] == 1.0)
    only_target = shapes.subset(np.flatnonzero(shapes.labels == 0))
    with pytest.raises(MetricError):
        asr_eval_set(only_target, PoisonSpec())


def test_blended_fifty_samples_implant_backdoor():
    data = synth_shapes(5000, 4, seed=0)
    train_set, test_set = split(data, [0.8, 1.0], 0)
    spec = PoisonSpec(attack="blended", poisoning_ratio=50 / 4000)
    poisoned = poison(train_set, spec)
    assert poisoned.poisoned.sum() == 50
    model = default_victim((1, 16, 16), 4, make_rng(0))
    train(model, poisoned, 10, 0.05)
    assert test_accuracy(model, test_set) >= 0.9
    assert attack_success_rate(model, asr_eval_set(test_set, spec), 0) >= 0.5
