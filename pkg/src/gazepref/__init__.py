"""Gaze-direction classification from pair-eye images.

Pipeline: grayscale frame -> LBP face cascade -> Haar eye cascade -> 72x72
pair-eye composite -> small CNN -> per-session gaze-preference report.
"""

from .cascade import (CascadeModel, FaceLandmarks, Rejection, detect_face_then_eyes,
                      detect_multiscale, group_rectangles, load_cascade, parse_cascade)
from .composer import PairEyeImage, compose_pair, quality_gate
from .dataset import (LabeledImages, Manifest, Sample, augment, augment_set, filter_classes,
                      kfold_split, load_manifest, save_manifest, synth_generate)
from .evaluate import ConfusionMatrix, CrossValReport, evaluate, normalize_confusion, run_kfold
from .imaging import GrayImage, Rect, RgbImage, integral, rect_sum, to_grayscale
from .session import (SamplerConfig, benchmark, classify_stream, sample_frames,
                      summarize)

__version__ = "0.1.0"
