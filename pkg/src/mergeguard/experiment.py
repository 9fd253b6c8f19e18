"""End-to-end runs: data, poisoning, victim training, defense, persistence."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .activations import Kind
from .attacks import asr_eval_set, poison
from .checkpoint import save_checkpoint, save_dataset
from .data import load_idx, split, synth_shapes
from .defense import Evaluation, defend
from .errors import MergeGuardError, StageError
from .layers import default_victim, mlp
from .rng import make_rng
from .training import train

log = logging.getLogger(__name__)


@dataclass
class Splits:
    """Everything a run needs: the victim's (poisoned) training set, the
    withheld benign subset, the clean test set, and its triggered copy."""

    victim_train: object
    benign: object
    test: object
    asr: object


def load_data(cfg):
    """Return ``(train_pool, test_set)`` for the configured source."""
    d = cfg.dataset
    if d.source == "idx":
        train_pool = load_idx(d.train_images, d.train_labels)
        test = load_idx(d.test_images, d.test_labels, train_pool.num_classes)
        if d.max_train is not None and d.max_train < len(train_pool):
            idx = make_rng(cfg.seed, "max_train").choice(len(train_pool), d.max_train, replace=False)
            train_pool = train_pool.subset(np.sort(idx))
        return train_pool, test
    full = synth_shapes(
        d.n_train + d.n_test, d.classes, d.height, d.width,
        seed=cfg.seed, noise=d.noise, clutter=d.clutter,
    )
    return split(full, [d.n_train / (d.n_train + d.n_test), 1.0], cfg.seed, "test_split")


def prepare_splits(cfg, attack=None):
    """Withhold the benign subset, then poison only the victim's share."""
    spec = attack or cfg.attack
    train_pool, test = load_data(cfg)
    bf = cfg.defense.benign_fraction
    victim_set, benign = split(train_pool, [1.0 - bf, bf], cfg.seed, "benign_split")
    return Splits(poison(victim_set, spec), benign, test, asr_eval_set(test, spec))


def build_victim(cfg, input_shape, num_classes):
    v = cfg.victim
    rng = make_rng(cfg.seed, "victim_init")
    if v.arch == "mlp":
        n_in = int(np.prod(input_shape))
        return mlp([n_in, v.hidden, num_classes], rng, Kind(v.act), input_shape)
    return default_victim(input_shape, num_classes, rng, v.hidden, v.channels, Kind(v.act))


def train_victim(cfg, splits):
    s = splits.victim_train
    model = build_victim(cfg, s.image_shape, s.num_classes)
    v = cfg.victim
    train(model, s, v.epochs, v.learning_rate, v.momentum, v.batch_size,
          seed=cfg.seed, stream="victim")
    return model


def _stage(name, partial, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (MergeGuardError, OSError, ValueError, FloatingPointError) as exc:
        raise StageError(name, exc, partial) from exc


def _pipeline(cfg, attack, partial):
    splits = _stage("data", partial, prepare_splits, cfg, attack)
    partial["data"] = {
        "victim_train": len(splits.victim_train),
        "benign": len(splits.benign),
        "test": len(splits.test),
        "poisoned": int(splits.victim_train.poisoned.sum()),
    }
    victim = _stage("victim", partial, train_victim, cfg, splits)
    evaluation = Evaluation(splits.test, splits.asr, attack.target_label)
    defended, report = _stage(
        "defense", partial, defend, victim, splits.benign, cfg.defense, evaluation, attack.attack.value
    )
    return splits, victim, defended, report


def run_experiment(cfg, out_dir=None, save=True):
    """Run the configured pipeline and return its :class:`ExperimentReport`.

    With ``save`` the victim and defended checkpoints, the exported data
    splits, the report (JSON and CSV) and figures land in ``out_dir``
    (default ``cfg.out``). Stage failures raise :class:`StageError`
    carrying whatever was finished.
    """
    from .report import write_outputs

    partial = {"config": cfg.to_dict()}
    splits, victim, defended, report = _pipeline(cfg, cfg.attack, partial)
    report.config = cfg.to_dict()
    partial["report"] = report.to_dict()
    if cfg.safety_run:
        clean_attack = replace(cfg.attack, poisoning_ratio=0.0)
        _, _, _, clean = _pipeline(cfg, clean_attack, partial)
        report.safety = {
            "test_acc_before": clean.trojaned.test_acc,
            "test_acc_after": clean.defended.test_acc,
            "acc_change": clean.defended.test_acc - clean.trojaned.test_acc,
            "asr_before": clean.trojaned.asr,
            "asr_after": clean.defended.asr,
            "selected_learning_rate": clean.selected_learning_rate,
            "merged_blocks": len(clean.merges),
        }
    if save:
        out = Path(out_dir or cfg.out)

        def persist():
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(victim, out / "victim.ckpt", cfg.seed, {"role": "trojaned"})
            save_checkpoint(defended, out / "defended.ckpt", cfg.seed, {"role": "defended"})
            save_dataset(splits.benign, out / "benign.mgds", {"role": "benign"})
            save_dataset(splits.test, out / "test.mgds", {"role": "test"})
            save_dataset(splits.asr, out / "asr.mgds", {"role": "asr", "target_label": cfg.attack.target_label})
            write_outputs(report, out, figures=cfg.figures)

        _stage("persist", partial, persist)
    return report
