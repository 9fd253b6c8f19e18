"""Dataset poisoning: BadNet patches, Blended key images, SIG sinusoids."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabeledImageSet
from .errors import MetricError, SpecError
from .rng import make_rng


class Attack(str, enum.Enum):
    BADNET = "badnet"
    BLENDED = "blended"
    SIG = "sig"


@dataclass
class PoisonSpec:
    attack: Attack = Attack.BADNET
    poisoning_ratio: float = 0.1
    target_label: int = 0
    seed: int = 0
    # BadNet
    patch_size: int = 3
    patch_value: float = 1.0
    patch_corner: str = "bottom-right"
    # Blended
    blend_weight: float = 0.2
    key_seed: int = 1234
    # SIG
    sig_amplitude: float = 20 / 255
    sig_frequency: int = 6

    def __post_init__(self):
        self.attack = Attack(self.attack)
        if not 0.0 <= self.poisoning_ratio <= 1.0:
            raise SpecError(f"poisoning_ratio must lie in [0, 1], got {self.poisoning_ratio}")
        if self.target_label < 0:
            raise SpecError(f"target_label must be a class index, got {self.target_label}")
        if self.patch_corner not in CORNERS:
            raise SpecError(f"patch_corner must be one of {sorted(CORNERS)}")

    def to_dict(self):
        d = asdict(self)
        d["attack"] = self.attack.value
        return d

    def validate_for(self, dataset):
        _, h, w = dataset.image_shape
        if self.target_label >= dataset.num_classes:
            raise SpecError(f"target label {self.target_label} >= {dataset.num_classes} classes")
        if self.attack is Attack.BADNET and not 1 <= self.patch_size <= min(h, w):
            raise SpecError(f"{self.patch_size}x{self.patch_size} patch does not fit a {h}x{w} image")
        if self.attack is Attack.BLENDED and not 0.0 <= self.blend_weight <= 1.0:
            raise SpecError(f"blend weight must lie in [0, 1], got {self.blend_weight}")
        if self.attack is Attack.SIG:
            if not 0.0 <= self.sig_amplitude < 1.0:
                raise SpecError(f"SIG amplitude must lie in [0, 1), got {self.sig_amplitude}")
            if int(self.sig_frequency) != self.sig_frequency or self.sig_frequency < 1:
                raise SpecError(f"SIG frequency must be a positive integer, got {self.sig_frequency}")


CORNERS = {"bottom-right", "bottom-left", "top-right", "top-left"}


def _patch_slices(spec, h, w):
    p = spec.patch_size
    rows = slice(h - p, h) if spec.patch_corner.startswith("bottom") else slice(0, p)
    cols = slice(w - p, w) if spec.patch_corner.endswith("right") else slice(0, p)
    return rows, cols


def key_image(spec, shape):
    """Seeded uniform-noise key used by the Blended attack."""
    return make_rng(spec.key_seed, "blend_key").random(shape).astype(np.float32)


def sig_signal(spec, h, w):
    j = np.arange(w)
    row = spec.sig_amplitude * np.sin(2 * math.pi * j * spec.sig_frequency / w)
    return np.broadcast_to(row, (h, w)).astype(np.float32)


def apply_trigger(images, spec, key=None):
    """Stamp the trigger of ``spec`` onto a batch of (n, c, h, w) images."""
    out = np.array(images, dtype=np.float32, copy=True)
    _, _, h, w = out.shape
    if spec.attack is Attack.BADNET:
        rows, cols = _patch_slices(spec, h, w)
        out[:, :, rows, cols] = spec.patch_value
    elif spec.attack is Attack.BLENDED:
        if key is None:
            key = key_image(spec, out.shape[1:])
        key = np.asarray(key, dtype=np.float32)
        if key.shape != out.shape[1:]:
            raise SpecError(f"key image {key.shape} does not match images {out.shape[1:]}")
        lam = np.float32(spec.blend_weight)
        out = (np.float32(1) - lam) * out + lam * key
    else:
        out = out + sig_signal(spec, h, w)
    return np.clip(out, 0.0, 1.0)


def _choose(spec, candidates):
    count = int(math.floor(spec.poisoning_ratio * len(candidates) + 1e-9))
    rng = make_rng(spec.seed, "poison", spec.attack.value)
    return np.sort(rng.choice(candidates, size=count, replace=False)) if count else np.array([], dtype=int)


def _poison_relabel(dataset, spec, key=None):
    spec.validate_for(dataset)
    out = dataset.copy()
    idx = _choose(spec, np.arange(len(dataset)))
    if len(idx):
        out.images[idx] = apply_trigger(out.images[idx], spec, key)
        out.labels[idx] = spec.target_label
        out.poisoned[idx] = True
    return out


def poison_badnet(dataset, spec):
    """Stamp a solid patch on floor(ratio * n) samples and relabel them to the target."""
    if spec.attack is not Attack.BADNET:
        raise SpecError("poison_badnet needs a BADNET spec")
    return _poison_relabel(dataset, spec)


def poison_blended(dataset, spec, key=None):
    """``x' = (1 - w) x + w key`` on floor(ratio * n) samples, relabelled."""
    if spec.attack is not Attack.BLENDED:
        raise SpecError("poison_blended needs a BLENDED spec")
    return _poison_relabel(dataset, spec, key)


def poison_sig(dataset, spec):
    """Clean-label SIG: add a column sinusoid to a ratio of the target-class samples.

    Labels are never changed.
    """
    if spec.attack is not Attack.SIG:
        raise SpecError("poison_sig needs a SIG spec")
    spec.validate_for(dataset)
    out = dataset.copy()
    idx = _choose(spec, np.flatnonzero(dataset.labels == spec.target_label))
    if len(idx):
        out.images[idx] = apply_trigger(out.images[idx], spec)
        out.poisoned[idx] = True
    return out


def poison(dataset, spec):
    return {
        Attack.BADNET: poison_badnet,
        Attack.BLENDED: poison_blended,
        Attack.SIG: poison_sig,
    }[spec.attack](dataset, spec)


def asr_eval_set(clean_set, spec):
    """Triggered copies of clean samples whose true label is not the target.

    Labels keep the true class so the set doubles as a record of what the
    model should have predicted.
    """
    keep = np.flatnonzero(clean_set.labels != spec.target_label)
    if len(keep) == 0:
        raise MetricError("no clean samples outside the target class to trigger")
    sub = clean_set.subset(keep)
    sub.images = apply_trigger(sub.images, spec)
    sub.poisoned[:] = True
    return sub
