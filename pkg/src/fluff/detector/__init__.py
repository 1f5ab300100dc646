from .boxes import BoxSet, PriorBoxSpec, decode_boxes, encode_boxes, generate_priors, iou, iou_matrix, nms, nms_indices
from .loss import LossResult, match_priors, multibox_loss
from .metrics import average_precision, detections_from_jsonl, detections_to_jsonl, evaluate_map
from .network import Detector

__all__ = [
    "BoxSet", "PriorBoxSpec", "decode_boxes", "encode_boxes", "generate_priors", "iou", "iou_matrix", "nms",
    "nms_indices", "LossResult", "match_priors", "multibox_loss", "average_precision", "detections_from_jsonl",
    "detections_to_jsonl", "evaluate_map", "Detector",
]
