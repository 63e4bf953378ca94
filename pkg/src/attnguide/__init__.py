"""attnguide: inference-time cross-attention guidance on a toy video denoiser."""

__version__ = "0.1.0"

from .autodiff import Tensor, finite_diff_check, matmul, softmax_lastdim
from .boxes import (
    BoxTrajectory,
    MaskSet,
    SpatialPriorSet,
    parse_llm_boxes,
    rasterize_masks,
    resample_frames,
    serialize_boxes,
    validate_trajectories,
)
from .denoiser import (
    CAMapStack,
    DDIMSchedule,
    LatentState,
    LinearAttentionStub,
    TAMap,
    ToyDenoiser,
    ToyModelConfig,
    ddim_step,
)
from .guidance import (
    GuidanceConfig,
    GuidanceTrace,
    dist,
    guide_latent,
    loss_bg,
    loss_fg,
    loss_neg,
    loss_pos,
    loss_sp,
    loss_syt,
    run_guided_sampling,
)
from .metrics import (
    MetricsReport,
    count_components,
    in_box_ratio,
    render_heatmap,
    run_ablation,
    verb_noun_alignment,
)
from .syntax import SyntaxPairs, Token, TokenSequence, extract_pairs, tokenize

__all__ = [
    "Tensor", "finite_diff_check", "matmul", "softmax_lastdim",
    "BoxTrajectory", "MaskSet", "SpatialPriorSet", "parse_llm_boxes", "rasterize_masks",
    "resample_frames", "serialize_boxes", "validate_trajectories",
    "CAMapStack", "DDIMSchedule", "LatentState", "LinearAttentionStub",
    "TAMap", "ToyDenoiser", "ToyModelConfig", "ddim_step",
    "GuidanceConfig", "GuidanceTrace", "dist", "guide_latent",
    "loss_bg", "loss_fg", "loss_neg", "loss_pos", "loss_sp", "loss_syt",
    "run_guided_sampling",
    "MetricsReport", "count_components", "in_box_ratio", "render_heatmap",
    "run_ablation", "verb_noun_alignment",
    "SyntaxPairs", "Token", "TokenSequence", "extract_pairs", "tokenize",
]
