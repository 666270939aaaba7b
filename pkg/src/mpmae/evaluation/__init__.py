"""Downstream evaluation: synthetic tasks, metrics, probing, fine-tuning, sweeps."""

from .downstream import (
    MULTICLASS,
    MULTILABEL,
    SEGMENTATION,
    TASK_KINDS,
    DownstreamTask,
    build_downstream,
    load_downstream,
    stratified_subsample,
)
from .metrics import iou_per_class, macro_iou, micro_f1, overall_accuracy
from .probe import Classifier, MetricReport, ProbeConfig, encoder_digest, fine_tune_classifier, linear_probe
from .segmentation import UNetSegmenter, build_unet_segmenter, evaluate_segmenter, fine_tune_segmenter_two_phase
from .sweep import DEFAULT_FRACTIONS, ResultsStore, label_efficiency_sweep, sweep_train_subset

__all__ = [
    "MULTICLASS",
    "MULTILABEL",
    "SEGMENTATION",
    "TASK_KINDS",
    "DownstreamTask",
    "build_downstream",
    "load_downstream",
    "stratified_subsample",
    "iou_per_class",
    "macro_iou",
    "micro_f1",
    "overall_accuracy",
    "Classifier",
    "MetricReport",
    "ProbeConfig",
    "encoder_digest",
    "fine_tune_classifier",
    "linear_probe",
    "UNetSegmenter",
    "build_unet_segmenter",
    "evaluate_segmenter",
    "fine_tune_segmenter_two_phase",
    "DEFAULT_FRACTIONS",
    "ResultsStore",
    "label_efficiency_sweep",
    "sweep_train_subset",
]
