"""Human-in-the-loop attention editing for a small convolutional classifier.

Train an attention-branch model, harvest the samples it gets wrong, let a
person repaint where the model should have looked, then fine-tune the
branches so the corrected maps stick. Ships its own reverse-mode autodiff
over numpy arrays with an optional compiled convolution core.
"""

from .autodiff import (OptimizerState, Tensor, backward, gradient_check,
                       no_grad, sgd_step)
from .data import (ArrayDataset, DatasetManifest, ManifestEntry,
                   SyntheticSample, generate, load_manifest, load_pgm,
                   load_ppm, oracle_map, save_dataset, save_manifest,
                   save_pgm, save_ppm)
from .kernels import get_backend
from .maps import (AttentionMap, BrushStroke, BubbleAnnotation,
                   SegmentationMask, apply_stroke, bubble_density,
                   bubbles_to_map, decode_map, encode_map, load_bubbles,
                   load_map, overlay, resize_map, save_bubbles, save_map,
                   segmentation_to_map)
from .metrics import (CurvePoint, MetricReport, SampleMetrics, deletion_score,
                      evaluate_model, insertion_score, map_similarity_mse)
from .model import (ABNModel, ForwardResult, ModelConfig, apply_attention,
                    build_model, forward, infer_with_map, load_checkpoint,
                    predict_topk, save_checkpoint)
from .training import (FinetuneConfig, LossBreakdown, Misclassified,
                       TrainConfig, accuracy, collect_misclassified,
                       finetune_with_maps, loss_map, read_history, train_abn,
                       write_history)

__version__ = "0.1.0"

__all__ = [
    "ABNModel", "ArrayDataset", "AttentionMap", "BrushStroke",
    "BubbleAnnotation", "CurvePoint", "DatasetManifest", "FinetuneConfig",
    "ForwardResult", "LossBreakdown", "ManifestEntry", "MetricReport",
    "Misclassified", "ModelConfig", "OptimizerState", "SampleMetrics",
    "SegmentationMask", "SyntheticSample", "Tensor", "TrainConfig",
    "accuracy", "apply_attention", "apply_stroke", "backward",
    "bubble_density", "bubbles_to_map", "build_model", "collect_misclassified",
    "decode_map", "deletion_score", "encode_map", "evaluate_model",
    "finetune_with_maps", "forward", "generate", "get_backend",
    "gradient_check", "infer_with_map", "insertion_score", "load_bubbles",
    "load_checkpoint", "load_manifest", "load_map", "load_pgm", "load_ppm",
    "loss_map", "map_similarity_mse", "no_grad", "oracle_map", "overlay",
    "predict_topk", "read_history", "resize_map", "save_bubbles",
    "save_checkpoint", "save_dataset", "save_manifest", "save_map", "save_pgm",
    "save_ppm", "segmentation_to_map", "sgd_step", "train_abn",
    "write_history",
]
