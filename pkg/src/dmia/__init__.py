"""Distribution-level membership inference for distilled generative models."""

from dmia.numeric import RngStream, gaussian_noise, pairwise_sq_dists, subsample
from dmia.featurenet import AdamState, FeatureNet, adam_step
from dmia.kernels import DeepKernel, deep_gram, gaussian_gram, median_bandwidth
from dmia.mmd import (
    MmdEstimate,
    dmia_loss_and_grad,
    h_matrix,
    mmd2_u,
    mmd_estimate,
    normalized_stat,
    variance_reg,
)
from dmia.attack import (
    DetectConfig,
    DetectionReport,
    EnsembleReport,
    TrainConfig,
    detect_candidate,
    ensemble_detect,
    train_deep_kernel,
)
from dmia.worldsim import (
    EncoderHandle,
    WorldInstance,
    WorldSpec,
    build_world,
    encode,
    make_candidate,
)

from dmia.baseline import InstanceScoreTable, instance_attack_metrics, instance_scores
from dmia.metrics import asr, auc, best_asr, tpr_at_fpr

__version__ = "0.1.0"
