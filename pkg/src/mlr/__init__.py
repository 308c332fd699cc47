"""Mask-based latent reconstruction for reinforcement learning from pixels."""
from .core import Batch, ReplayBuffer, Trajectory, TrajectoryBatch, Transition
from .decoder import DecoderConfig, LatentDecoder, layer_parameter_count, sinusoidal_table
from .errors import (ConfigError, DegenerateReference, EmptyLog, InsufficientData, InvalidSpec,
                     LengthMismatch, MLRError, NumericalError, ShapeMismatch, SteppedDoneEnv,
                     TypeMismatch, UnknownKey)
from .nets import Encoder, EncoderConfig, HeadConfig, Heads, MomentumPair, ema_update
from .objective import LossMetric, MaskSpace, MLRConfig, MLRObjective, TargetSpace, mlr_loss, total_loss
from .pixelops import AugmentSpec, CubeMaskSpec, MaskStrategy, apply_mask, augment_batch, sample_mask

__version__ = "0.1.0"
