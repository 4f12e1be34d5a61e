"""Desk-scale one-shot identity customization of a toy diffusion model."""
from .analytics import EmbeddingStats, embedding_stats, project_2d
from .customizer import TrainConfig, masked_two_phase_loss, train_customizer
from .denoiser import Denoiser, ddim_sample, denoise, pretrain_denoiser
from .metrics import EvalReport, frechet_distance, identity_similarity
from .numcore import Tensor, no_grad
from .priorspace import PriorSpace, adain_land, build_prior
from .schedule import Schedule, forward_noise, make_schedule, predict_z0

__version__ = "0.1.0"
