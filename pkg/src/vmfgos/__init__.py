"""Long-tailed OOD detection with hyperspherical virtual outlier synthesis.

The package is a desk-scale laboratory: von Mises-Fisher statistics on the
unit sphere, outlier synthesis in a low-likelihood annulus, the joint
training objective on a small numpy network, and the OOD evaluation metrics.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DegenerateInputError,
    DomainError,
    NumericError,
    RecipeError,
    SaturationError,
    ShapeError,
    VmfGosError,
)
from .rng import RandomSource  # noqa: E402
from .sphere import (  # noqa: E402
    VmfComponent,
    VmfMixture,
    estimate_kappa,
    log_norm_const,
    mixture_log_density,
    normalize,
    sample_vmf,
    tangent_orthonormal,
    vmf_log_density,
)
from .special import bessel_ratio, chi2_cdf, log_bessel_i  # noqa: E402
from .gos import (  # noqa: E402
    AnnulusSpec,
    OutlierBatch,
    displacement_to_similarity,
    synthesize_balanced_batch,
    synthesize_outlier,
    verify_chi2_equivalence,
)
from .losses import (  # noqa: E402
    EnergyHead,
    LossWeights,
    dgs_loss,
    energy_score,
    epr_loss,
    tla_loss,
    total_loss,
)
from .nn import TinyNet, TrainConfig, TrainReport, load_checkpoint, save_checkpoint, train  # noqa: E402
from .metrics import (  # noqa: E402
    OdinConfig,
    ScoredSet,
    acc_at_fpr,
    acc_at_tpr,
    aupr,
    auroc,
    evaluate,
    fpr_at_tpr,
    odin_scores,
)
from .data import (  # noqa: E402
    LabeledFeatureSet,
    LongTailSpec,
    generate_long_tailed_vmf,
    generate_ood_set,
    load_features,
    save_features,
    well_separated_means,
)
