"""MergeGuard and the vanilla fine-tuning baseline, with the learning-rate sweep."""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import asdict, dataclass, field, fields

from .accounting import count_macs, count_params
from .errors import ConfigError, DefenseError
from .layers import DEFAULT_INIT_ALPHA
from .merge import DEFAULT_ALPHA_THRESHOLD, finalize_merge, find_mergeable_blocks
from .metrics import attack_success_rate, test_accuracy
from .training import train

log = logging.getLogger(__name__)

# lr grid searched when none is given; the best run is picked per seed
DEFAULT_LR_SWEEP = (0.05, 0.1, 0.15, 0.2, 0.3)


class Method(str, enum.Enum):
    MERGEGUARD = "mergeguard"
    FT = "ft"


@dataclass
class DefenseConfig:
    method: Method = Method.MERGEGUARD
    benign_fraction: float = 0.05
    lam: float = 1.0
    epochs: int = 20
    batch_size: int = 128
    momentum: float = 0.9
    learning_rate: float | list = field(default_factory=lambda: list(DEFAULT_LR_SWEEP))
    schedule: str = "cosine"
    k_last_blocks: int = 1
    alpha_threshold: float = DEFAULT_ALPHA_THRESHOLD
    init_alpha: float = DEFAULT_INIT_ALPHA
    parametrization: str | None = None
    clip_norm: float | None = 5.0
    max_acc_drop: float = 0.05
    restore_epochs: int = 0
    restore_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        try:
            self.method = Method(self.method)
        except ValueError:
            raise ConfigError(f"defense.method must be one of {[m.value for m in Method]}") from None
        if not 0.0 < self.benign_fraction <= 1.0:
            raise ConfigError(f"defense.benign_fraction must lie in (0, 1], got {self.benign_fraction}")
        if self.lam < 0:
            raise ConfigError(f"defense.lam must be >= 0, got {self.lam}")
        if self.k_last_blocks < 1:
            raise ConfigError(f"defense.k_last_blocks must be >= 1, got {self.k_last_blocks}")
        if self.epochs < 0 or self.restore_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"defense.schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.parametrization not in (None, "direct", "logistic"):
            raise ConfigError(f"defense.parametrization must be 'direct' or 'logistic'")
        if not self.learning_rates or any(lr <= 0 for lr in self.learning_rates):
            raise ConfigError("defense.learning_rate must be positive (a number or a list)")

    @property
    def learning_rates(self):
        lr = self.learning_rate
        return [float(v) for v in lr] if isinstance(lr, (list, tuple)) else [float(lr)]

    def to_dict(self):
        d = asdict(self)
        d["method"] = self.method.value
        return d


@dataclass
class Evaluation:
    """Held-out sets used to score a defended model."""

    test_set: object
    asr_set: object
    target_label: int

    def score(self, model):
        return PhaseMetrics(
            test_acc=test_accuracy(model, self.test_set),
            asr=attack_success_rate(model, self.asr_set, self.target_label),
        )


@dataclass
class PhaseMetrics:
    test_acc: float
    asr: float


@dataclass
class Candidate:
    learning_rate: float
    test_acc: float
    asr: float
    alphas: list
    merged_blocks: int
    final_loss: float


@dataclass
class ExperimentReport:
    attack: str
    method: str
    trojaned: PhaseMetrics
    defended: PhaseMetrics
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int
    alphas: list = field(default_factory=list)
    merges: list = field(default_factory=list)
    selected_learning_rate: float | None = None
    sweep: list = field(default_factory=list)
    alpha_history: list = field(default_factory=list)
    safety: dict | None = None
    config: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def cr(self):
        """Weight-only compression of all merged blocks taken together."""
        before = sum(m["weights_before"] for m in self.merges)
        after = sum(m["weights_after"] for m in self.merges)
        return 1.0 - after / before if before else None

    def to_dict(self, include_timing=False):
        d = asdict(self)
        d["cr"] = self.cr
        if not include_timing:
            d.pop("seconds")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("cr", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        d["trojaned"] = PhaseMetrics(**d["trojaned"])
        d["defended"] = PhaseMetrics(**d["defended"])
        return cls(**d)


def _wrap_blocks(model, config):
    blocks = find_mergeable_blocks(model)
    if not blocks:
        raise DefenseError(f"{model.name} has no mergeable [linear, activation, linear] blocks")
    if len(blocks) < config.k_last_blocks:
        raise DefenseError(
            f"{model.name} has {len(blocks)} mergeable blocks, k_last_blocks={config.k_last_blocks}"
        )
    chosen = blocks[len(blocks) - config.k_last_blocks:]
    for b in chosen:
        b.activation.unpin(config.init_alpha, config.parametrization)
    return chosen


def _fit_once(model, benign_set, config, lr):
    """One defense run at a single learning rate; returns (model, merges, alphas, history)."""
    model = model.copy()
    if config.method is Method.FT:
        history = train(
            model, benign_set, config.epochs, lr, config.momentum, config.batch_size,
            seed=config.seed, stream="defense", schedule=config.schedule,
            clip_norm=config.clip_norm,
        )
        return model, [], [], history
    blocks = _wrap_blocks(model, config)
    acts = [b.activation for b in blocks]
    history = train(
        model, benign_set, config.epochs, lr, config.momentum, config.batch_size,
        seed=config.seed, lam=config.lam, regularized=acts, stream="defense",
        schedule=config.schedule, clip_norm=config.clip_norm,
    )
    alphas = [float(a.alpha) for a in acts]
    model, records = finalize_merge(model, config.alpha_threshold, [b.block_id for b in blocks])
    if config.restore_epochs:
        train(
            model, benign_set, config.restore_epochs, config.restore_lr, config.momentum,
            config.batch_size, seed=config.seed, stream="restore",
        )
    return model, records, alphas, history


def _select(candidates, baseline_acc, config):
    """Greatest ASR reduction among runs that keep accuracy within the allowed drop.

    Runs that actually merged a block are preferred for MergeGuard. When no
    run passes the accuracy guard, the most accurate one is returned.
    """
    def key(i):
        c = candidates[i]
        guard_ok = baseline_acc is None or baseline_acc - c.test_acc <= config.max_acc_drop + 1e-12
        if not guard_ok:
            return (1, 0, -c.test_acc, c.learning_rate)
        merged_ok = config.method is Method.FT or c.merged_blocks > 0
        return (0, 0 if merged_ok else 1, c.asr, c.learning_rate)

    return min(range(len(candidates)), key=key)


def defend(model, benign_set, config, evaluation=None, attack="none"):
    """Run the configured defense and return ``(defended model, ExperimentReport)``.

    With several learning rates ``evaluation`` is required to pick the
    winner; with one it only fills in the report metrics.
    """
    start = time.perf_counter()
    lrs = config.learning_rates
    if len(lrs) > 1 and evaluation is None:
        raise DefenseError("a learning-rate sweep needs evaluation sets to choose from")
    nan = PhaseMetrics(float("nan"), float("nan"))
    trojaned = evaluation.score(model) if evaluation else nan
    runs, candidates = [], []
    for lr in lrs:
        out_model, records, alphas, history = _fit_once(model, benign_set, config, lr)
        scored = evaluation.score(out_model) if evaluation else nan
        runs.append((out_model, records, alphas, history))
        candidates.append(
            Candidate(lr, scored.test_acc, scored.asr, alphas, len(records),
                      history.loss[-1] if history.loss else float("nan"))
        )
        log.info("lr %.4g: acc %.4f asr %.4f merged %d", lr, scored.test_acc, scored.asr, len(records))
    best = _select(candidates, trojaned.test_acc if evaluation else None, config)
    out_model, records, alphas, history = runs[best]
    report = ExperimentReport(
        attack=attack,
        method=config.method.value,
        trojaned=trojaned,
        defended=PhaseMetrics(candidates[best].test_acc, candidates[best].asr),
        params_before=count_params(model),
        params_after=count_params(out_model),
        macs_before=count_macs(model),
        macs_after=count_macs(out_model),
        alphas=alphas,
        merges=[r.to_dict() for r in records],
        selected_learning_rate=lrs[best],
        sweep=[asdict(c) for c in candidates],
        alpha_history=history.alphas,
        config=config.to_dict(),
        seconds=time.perf_counter() - start,
    )
    return out_model, report


def mergeguard_defend(model, benign_set, config, evaluation=None, attack="none"):
    if config.method is not Method.MERGEGUARD:
        raise DefenseError(f"mergeguard_defend got a {config.method.value} config")
    return defend(model, benign_set, config, evaluation, attack)


def ft_defend(model, benign_set, config, evaluation=None, attack="none"):
    if config.method is not Method.FT:
        config = DefenseConfig(**{**config.to_dict(), "method": Method.FT})
    return defend(model, benign_set, config, evaluation, attack)
