"""Adversarial discriminative domain adaptation with reconstruction and MMD losses."""

from .autodiff import (AdamState, GradTape, LayerStack, adam_step, backward,
                       dropout_mask, finite_diff_check, forward, softmax)
from .datasets import (LabeledSet, SyntheticSpec, gen_two_domain, load_idx,
                       resize_bilinear, subsample, validation_split)
from .kernels import KernelSpec, dist2, kernel_eval, mmd2_biased, mmd2_grad_B, mmd2_oracle
from .models import (ArchSpec, DiscriminatorModel, EncoderModel, build_discriminator,
                     build_encoder, clone_into_target, discriminator_posteriors,
                     predict, zero_concat)
from .pipeline import (AdaptConfig, BaggedModel, adapt_target, bagged_infer,
                       compose_encoder_batch, infer, pretrain_source, run_experiment)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config

__version__ = "0.1.0"
