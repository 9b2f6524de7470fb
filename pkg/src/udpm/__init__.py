"""Upsampling diffusion probabilistic models on numpy."""

__version__ = "0.1.0"

from .degrade import (  # noqa: E402
    GramDescriptor,
    Kernel,
    adjoint,
    downsample,
    downsample_n,
    gram_apply,
    gram_filter_polyphase,
    make_box_kernel,
)
from .denoiser import Architecture, ConvDenoiser, EmaState, OracleDenoiser, ema_update  # noqa: E402
from .diffusion import (  # noqa: E402
    ElboReport,
    PosteriorParams,
    elbo_report,
    forward_marginal_sample,
    forward_step_sample,
    kl_quadratic,
    posterior_params,
    posterior_sample,
    sigma_apply,
    sigma_sqrt_apply,
)
from .generation import GuidanceConfig, LatentRecord, cfg_predict, sample  # noqa: E402
from .latent import InterpolationGrid, interpolate, perturb  # noqa: E402
from .schedule import Schedule, alpha_bar, discretize, steps_for_size  # noqa: E402
from .tensor import ImageTensor, RngStream, dft2, idft2, randn  # noqa: E402
from .training import TrainConfig, ToyDataset, adam_step, loss_simple, loss_sigma_weighted, train  # noqa: E402
