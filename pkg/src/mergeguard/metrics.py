from __future__ import annotations

import numpy as np

from .errors import MetricError


def _predict(model, images):
    return np.asarray(model.predict(images))


def attack_success_rate(model, poisoned_eval_set, target_label):
    """Fraction of triggered non-target samples the model sends to ``target_label``.

    Samples whose true label already is the target never count.
    """
    eligible = np.flatnonzero(poisoned_eval_set.labels != target_label)
    if len(eligible) == 0:
        raise MetricError("ASR undefined: no triggered samples outside the target class")
    preds = _predict(model, poisoned_eval_set.images[eligible])
    return float(np.mean(preds == target_label))


def test_accuracy(model, clean_set):
    if len(clean_set) == 0:
        raise MetricError("accuracy undefined on an empty set")
    preds = _predict(model, clean_set.images)
    return float(np.mean(preds == clean_set.labels))


# keep pytest from collecting the metric as a test when imported into test modules
test_accuracy.__test__ = False
