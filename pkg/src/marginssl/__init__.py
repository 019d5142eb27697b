"""Contrastive self-supervised speaker embeddings with additive-margin NT-Xent losses."""

from .autodiff import AdamState, Tensor, adam_step, lr_schedule
from .encoder import EncoderParams, encode, encode_batch, init_params
from .evaluation import ScoreSet, compute_eer, compute_min_dcf, score_trial
from .features import FeatureConfig, FeatureExtractor, MelSpectrogram, Waveform
from .losses import LossConfig, nt_xent, nt_xent_queue, nt_xent_symmetric
from .synthdata import AugmentPolicy, augment, generate_corpus
from .trainers import EmaEncoder, MemoryQueue, TrainConfig, moco_step, simclr_step, train

__version__ = "0.1.0"
