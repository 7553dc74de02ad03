"""Element Shapley values: fair per-element attributions for variable-length sequence models."""

from esv.analysis import (
    AblationCurve,
    ApproxQualityReport,
    EvalItem,
    ablate_by_rank,
    batch_quality,
    lad_slope,
    pearson_r,
    relative_error,
)
from esv.engine import (
    AttributionResult,
    approx_esv,
    class_combination,
    classify_elements,
    contrastive_esv,
    exact_esv,
    grow_candidates,
    sampled_fraction,
)
from esv.errors import CapacityError, ESVError, FileFormatError, UndefinedMetricError, ValidationError
from esv.models import (
    ModelSpec,
    MultiScaleModel,
    evaluate,
    load_model,
    multiscale_direct,
    multiscale_recurrent,
    random_model_spec,
)
from esv.sequence import (
    FeatureSequence,
    SubsequenceIndex,
    brute_force_esv,
    enumerate_subsequences,
    marginal_contribution,
    shapley_weight,
)

__version__ = "0.1.0"
