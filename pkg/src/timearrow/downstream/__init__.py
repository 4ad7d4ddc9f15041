from .metrics import (MatchResult, average_precision, connected_components, instances_from_probability,
                      iou_matrix, match_and_score, remove_small_objects)
from .probes import (DenseProbe, Probe, ProbeSpec, budget_size, dense_probe, embed, label_budget_sweep,
                     nested_budget_indices, segmentation_scores, train_probe)

__all__ = [
    "MatchResult", "average_precision", "connected_components", "instances_from_probability", "iou_matrix",
    "match_and_score", "remove_small_objects", "DenseProbe", "Probe", "ProbeSpec", "budget_size", "dense_probe",
    "embed", "label_budget_sweep", "nested_budget_indices", "segmentation_scores", "train_probe",
]
