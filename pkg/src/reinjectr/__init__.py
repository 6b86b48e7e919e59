"""Prompt-forgetting diagnostics and prompt reinjection for joint-attention diffusion transformers."""
from .corpus import CATEGORIES, LabeledTokenCorpus, build_corpus, geneval_like_prompts, split_word
from .errors import (
    CorruptDump,
    DegenerateWarning,
    InvalidInput,
    IoError,
    NumericalFailure,
    ReinjectrError,
    UnsupportedVersion,
)
from .linalg import PcaModel, SvdResult, TokenStats, layer_norm, pca_fit, pca_project, svd, token_stats
from .metrics import CknnaConfig, DriftReport, center_kernel, cknna, cosine_kernel, drift_report, knn_sets
from .mmdit import DiffusionBatch, MMDiTConfig, ToyMMDiT, forward, grad_check
from .probe import (
    ProbeConfig,
    ProbeModel,
    RecoverabilityCurve,
    probe_curve,
    recoverability,
    synthetic_drift_stack,
    train_probe,
)
from .reinject import (
    PRESETS,
    CostReport,
    ReinjectionPlan,
    RotationMap,
    anchored_inject,
    apply_plan,
    calibrate_rotation,
    calibrate_rotation_map,
    estimate_cost,
    plan_layers,
    preset_plan,
    residual_attribute_inject,
)
from .simulation import SyntheticTask, TaskSpec, extract_stack, minimal_pair_demo, train_toy
from .stack import FeatureStack

__version__ = "0.1.0"
