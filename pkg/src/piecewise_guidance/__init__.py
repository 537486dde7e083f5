"""Diffusion posterior sampling for linear inverse problems with piecewise guidance."""

from .analysis import GaussianDist, coefficient_curve, gaussian_kl, kl_theorem1, kl_theorem2
from .guidance import GuidanceConfig, guidance_high, guidance_low, piecewise_guidance
from .metrics import ImageBuffer, psnr, ssim
from .operators import (Measurement, make_avgpool_sr, make_center_mask, make_dense,
                        make_random_mask, solve_gram)
from .priors import (GmmPrior, GmmScoreModel, forward_diffuse, gaussian_exact_posterior,
                     gmm_score)
from .sampler import (RunRecord, SamplerOptions, run_batch, sample_posterior,
                      sample_posterior_batch, sample_unconditional)
from .schedule import NoiseSchedule, build_linear_schedule, ddim_coefficients

__version__ = "0.1.0"
