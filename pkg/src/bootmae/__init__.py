"""Bootstrapped masked autoencoders for vision transformers, at desk scale.

A small numpy autodiff engine carries a ViT encoder, a pixel regressor and a
feature predictor that regresses the outputs of a momentum (EMA) copy of the
encoder. Both decoders receive encoder features through cross-attention.
"""

from .config import ModelConfig, RunConfig, TrainConfig, load_config, toy_config
from .data import Dataset, SynthSpec, load_images, synth_dataset
from .engine import TrainState, init_state, load_checkpoint, pretrain, pretrain_epoch, save_checkpoint
from .estimators import BootMAE, FineTuneClassifier, LinearProbeClassifier
from .evaluate import finetune, linear_probe
from .masking import MaskPlan, PatchGrid, block_mask, center_weights, patchify, random_mask, unpatchify
from .model import BootMAEModel, ForwardArtifacts
from .tensor import Tensor

__version__ = "0.1.0"
