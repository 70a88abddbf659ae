"""conceptproto: interpretable classification via multi-level concept
prototypes. Feature maps are partitioned into channel segments, segments
are trained to be mutually independent (CKA loss), one global prototype
per segment is extracted by energy-weighted PCA, and samples are
classified by matching their concept-response distributions to class
centroids under Jensen-Shannon divergence."""

from .backbone import BackboneSpec, MultiStageBackbone, build_backbone
from .distribution import (
    CCDParams,
    ClassCentroidSet,
    ConceptDistribution,
    build_distribution,
    ccd_loss,
    class_centroids,
    classify,
    concept_discriminativeness,
    js_divergence,
)
from .kernel_alignment import (
    cka,
    cka_loss_layer,
    cka_similarity_matrix,
    gram_linear,
    hsic_unbiased,
)
from .prototypes import (
    ConceptPrototype,
    PrototypeBank,
    WeightedMoments,
    accumulate_moments,
    extract_prototype,
    prototype_response,
    response_map,
)
from .segmentation import SegmentationConfig, flatten_for_cka, split_segments
from .training import (
    EpochLosses,
    TrainConfig,
    TrainState,
    fit,
    gradient_check,
    refresh_globals,
    total_loss,
    train_epoch,
)
from .fewshot import FewShotSplit, fewshot_centroids, fewshot_evaluate, make_split

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "CCDParams",
    "ClassCentroidSet",
    "ConceptDistribution",
    "ConceptPrototype",
    "EpochLosses",
    "FewShotSplit",
    "MultiStageBackbone",
    "PrototypeBank",
    "SegmentationConfig",
    "TrainConfig",
    "TrainState",
    "WeightedMoments",
    "accumulate_moments",
    "build_backbone",
    "build_distribution",
    "ccd_loss",
    "cka",
    "cka_loss_layer",
    "cka_similarity_matrix",
    "class_centroids",
    "classify",
    "concept_discriminativeness",
    "extract_prototype",
    "fewshot_centroids",
    "fewshot_evaluate",
    "fit",
    "flatten_for_cka",
    "gram_linear",
    "gradient_check",
    "hsic_unbiased",
    "js_divergence",
    "make_split",
    "prototype_response",
    "refresh_globals",
    "response_map",
    "split_segments",
    "total_loss",
    "train_epoch",
]
