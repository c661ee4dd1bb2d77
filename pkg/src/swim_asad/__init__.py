"""Auditory spatial attention decoding with a short-window CNN and a selective state-space model."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, model_from_checkpoint, save_checkpoint
from .dataio import (
    DataError,
    DecisionWindow,
    EEGTrial,
    SplitSpec,
    SynthConfig,
    extract_windows,
    load_dataset,
    make_split,
    normalize_trial,
    save_dataset,
    synth_generate,
    time_mask,
    window_count,
)
from .evalkit import channel_importance, combine_models, evaluate, trial_range_experiment, window_sweep
from .ssm import MambaBackbone, MambaConfig, mamba_step, selective_scan_parallel, selective_scan_sequential
from .swcnn import SWCNN, SWCNNConfig, multitask_loss
from .swim import SWIM, SWIMConfig, stream_init, stream_push, swim_forward
from .tensor import ShapeError, Tensor, grad_check
from .trainer import TrainConfig, TrainingError, train

__version__ = "0.1.0"
