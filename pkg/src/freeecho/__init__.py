"""Training-free segmentation-conditioned echocardiogram video generation.

An unconditional video denoiser is steered by a pseudo-video built from the
segmentation: labels are colorized, histogram-matched to the training data
by entropic optimal transport, replicated over frames, noised to an
intermediate level and denoised along the probability-flow ODE.
"""

from .config import Config, ConfigError, load_config
from .data import (CAMUS_LABELS, ECHONET_LABELS, Dataset, SegmentationMap, ToyDatasetConfig, VideoVolume,
                   generate_toy_dataset, load_dataset)
from .denoiser import (GaussianOracle, PreconditionedDenoiser, TorchDenoiser, gaussian_oracle_denoiser,
                       load_checkpoint, save_checkpoint, wrap_preconditioned)
from .evaluation import MetricReport, evaluate_method, format_table, frechet_distance, psnr, ssim
from .pipeline import ClassifierFreeGenerator, FreeEchoGenerator, SDEditGenerator, UnconditionalGenerator
from .pseudo import TransportPlan, make_free_echo_init, make_sdedit_init, sinkhorn
from .sampler import SamplerConfig, sample_full, sample_truncated
from .schedule import NoiseSchedule, loss_weight, precondition_coeffs, sample_training_sigma, step_sigmas
from .training import TrainConfig, denoising_loss, train, train_classifier_free
from .unet3d import UNet3D, UNet3DConfig, build_unet3d

__version__ = "0.1.0"
