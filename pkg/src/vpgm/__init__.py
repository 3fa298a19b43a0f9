"""Verbalized probabilistic graphical models for LLM agents, with a
Dirichlet-posterior calibration layer over sampled answers."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationBatch,
    FitResult,
    calibration_loss,
    class_alignment,
    fit_lambda,
    loss_gradient,
    posterior_mean,
    theorem1_check,
)
from .data import QuestionInput
from .gateway import CompletionRequest, HttpProvider, MockProvider, ProviderConfig
from .graph import (
    DependencyEdge,
    LatentVariable,
    PgmStructure,
    VerbalizedCpd,
    parents_of,
    topological_order,
    validate,
)
from .inference import QuestionRecord, consistency_baseline, run_question, vpgm_expectation
from .metrics import classwise_ece, ece, latent_analysis, make_noisy_control, pearson, reliability_table
from .prompts import DiscoverySpec, build_discovery_prompt, build_inference_prompt, parse_reply
