"""MergeGuard: remove trojans by linearizing activations and fusing the layers around them."""
from .accounting import count_macs, count_params, merge_savings
from .attacks import Attack, PoisonSpec, asr_eval_set, poison
from .checkpoint import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .config import RunConfig, load_config, parse_config
from .data import LabeledImageSet, load_idx, synth_shapes
from .defense import DefenseConfig, ExperimentReport, ft_defend, mergeguard_defend
from .experiment import run_experiment
from .layers import Conv2d, Dense, Model, ParametricActivation, default_victim
from .merge import audit_bound, finalize_merge, find_mergeable_blocks, merge_block
from .metrics import attack_success_rate, test_accuracy
from .report import emit_report

__version__ = "0.1.0"
