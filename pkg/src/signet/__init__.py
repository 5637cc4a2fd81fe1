"""Modulation classification with a trainable signal-to-matrix front end.

The core operator maps each IQ channel to ``M = S F S^T`` where ``S`` stacks
sliding windows of the signal and ``F`` is a learned ``k x k`` filter; the
resulting images feed a residual CNN and both are trained jointly.
"""

from .estimator import SigNetClassifier
from .exceptions import SignetError
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .sigsynth import SignalDataset, SynthConfig, generate_dataset, read_dataset, write_dataset
from .training import SplitSpec, TrainConfig, split_dataset, train
from .transforms import S2MTransformer, s2m_backward, s2m_forward, slice_signal

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "S2MTransformer",
    "SigNetClassifier",
    "SignalDataset",
    "SignetError",
    "SplitSpec",
    "SynthConfig",
    "TrainConfig",
    "build_model",
    "generate_dataset",
    "load_checkpoint",
    "read_dataset",
    "s2m_backward",
    "s2m_forward",
    "save_checkpoint",
    "slice_signal",
    "split_dataset",
    "train",
    "write_dataset",
]
