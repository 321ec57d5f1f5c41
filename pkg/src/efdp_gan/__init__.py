"""Differentially private conditional GAN training with clipped error feedback."""

from .accountant import DpBudget, RdpLedger, rdp_gaussian, rdp_subsampled_gaussian, step_account, steps_for_budget, to_eps_delta
from .config import TrainConfig, load_config
from .data import LabeledDataset, SynthLayout, read_idx, synth_dataset, write_idx
from .losses import LossWeights, loss_classifier, loss_discriminator, loss_generator, loss_reconstruction
from .models import GeneratorArch, GeneratorNet, ModelBundle, NoiseConfig, generator_backward, generator_forward, inject_noise
from .numeric import ParamVector, RngStream, gaussian_sample, grad_check, l2_norm
from .sanitizer import ClipConfig, DpNoiseConfig, EfState, apply_update, clip, dp_noise, ef_step, sanitize_hook

__version__ = "0.1.0"
