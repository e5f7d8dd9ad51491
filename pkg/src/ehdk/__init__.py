"""Framework-free toy detector: reverse-mode tensors, wavelet and attention blocks,
a reparameterizable fusion neck, GIoU/Soft-NMS post-processing and an mAP evaluator."""

from .boxes import Box, Detection, SoftNmsConfig, assign_targets, giou, iou, soft_nms
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import DatasetSample, SynthConfig, augment, generate_dataset, load_dataset
from .errors import (BoundsError, ConfigError, DivergenceError, EHDKError, NumericError, ParseError,
                     ShapeError, StateError, StatisticsError, ValidationError)
from .gradcheck import grad_check
from .metrics import evaluate_map
from .model import ModelConfig, build_model, forward_detect, postprocess, predict
from .tensor import Tensor, detect_anomaly, no_grad
from .train import TrainConfig, train

__version__ = "0.1.0"
