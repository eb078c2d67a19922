"""Semantic Gaussian splatting engine.

Gaussian primitives carry appearance and per-primitive semantic feature
embeddings; a differentiable multi-channel rasterizer composites color,
features, depth, alpha and normals, with pixel-aligned unprojection,
attention-weight feature lifting, a multi-task objective and a CLI for
rendering, fitting, gradient checking and scoring.
"""

from ._kernels import NUMBA_ENABLED, backend_name
from .attention import (
    AttentionCache,
    BlockWeights,
    PatchTokens,
    RelPosBias,
    TransformerConfig,
    cross_attn_reuse,
    decode_gaussians,
    gqa_block,
    patchify,
    reuse_weights,
    rmsnorm,
    run_blocks,
)
from .camera import Camera, plucker_embedding, project_covariance, project_point, unproject
from .core import (
    CLASS_NAMES,
    NUM_CLASSES,
    ActivationConfig,
    ClassPalette,
    GaussianCloud,
    RawGaussianParams,
    activate_params,
    covariance_from,
    eval_sh,
    filter_low_opacity,
    normalize_scene,
    quaternion_to_matrix,
    sh_basis,
)
from .gradients import (
    AdamConfig,
    FitView,
    GradCheckReport,
    ParamGradients,
    backward_render,
    cosine_schedule,
    finite_diff_check,
    fit_start_cloud,
    optimize_cloud,
    raw_gradients,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    feature_dist_loss,
    render_loss,
    seg_ce_loss,
    total_loss,
)
from .metrics import psnr, seg_scores, ssim
from .rasterizer import (
    RenderOutput,
    RenderSettings,
    composite_fragments,
    render,
    render_labels,
    render_reference,
)

__version__ = "0.1.0"
