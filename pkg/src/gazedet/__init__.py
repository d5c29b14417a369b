"""Gaze-guided object detection with a from-scratch numpy transformer."""

from .attention import AttentionConfig, PatchGrid, gaze_bias, mha_forward, multi_head_attention, patch_centers
from .boxes import Box, giou, iou, roi_scale
from .detector import DetectorConfig, LabeledFrame, forward, init_params, predict, train
from .errors import (CapacityError, ConfigurationError, ContractError, DegenerateDirectionError, DimensionError,
                     DivergenceError, GenerationError, UndefinedSimilarityError)
from .gaze_pipeline import GazeRecord, RawGazeSample, preprocess
from .matching import hungarian_match

__version__ = "0.1.0"
