"""Keyword spotting with class and instance data parameters."""

from .corpus import CorpusCounts, KeywordSpec, TargetInventory, build_multicondition, generate_corpus
from .dataparams import DataParameterStore, dp_cross_entropy, effective_sigma, sigma_gradient
from .estimators import AcousticModelClassifier, KeywordScorer, MFCCStacker
from .evaluation import det_curve, frr_at_fa_rate, sigma_distribution_report
from .features import FrameSpec, mfcc, stack_context
from .kws import KeywordHmm, estimate_transitions, keyword_score
from .netcore import AcousticModel
from .trainer import TrainConfig, cv_loss, train

__version__ = "0.1.0"

__all__ = [
    "AcousticModel",
    "AcousticModelClassifier",
    "CorpusCounts",
    "DataParameterStore",
    "FrameSpec",
    "KeywordHmm",
    "KeywordScorer",
    "KeywordSpec",
    "MFCCStacker",
    "TargetInventory",
    "TrainConfig",
    "build_multicondition",
    "cv_loss",
    "det_curve",
    "dp_cross_entropy",
    "effective_sigma",
    "estimate_transitions",
    "frr_at_fa_rate",
    "generate_corpus",
    "keyword_score",
    "mfcc",
    "sigma_distribution_report",
    "sigma_gradient",
    "stack_context",
    "train",
]
