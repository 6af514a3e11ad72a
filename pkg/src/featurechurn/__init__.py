"""Feature-churn training: fixed-size active feature sets swapped during training."""

from featurechurn.engine import (
    CandidateExhaustion,
    ChurnConfig,
    ColumnSource,
    TrainAccuracy,
    churn_step,
    init_state,
    run_classification,
    run_fixed,
    run_regression,
    splice_weights,
)
from featurechurn.models import (
    DivergenceError,
    MlpModel,
    RegressionModel,
    TrainBatch,
    accuracy,
    cross_entropy_loss,
    mlp_forward,
    mse_loss,
    train_mlp,
    train_regression,
)
from featurechurn.pool import (
    Bias,
    FeaturePool,
    Monomial,
    PixelPair,
    PixelSquare,
    RawPixel,
    deviation_filter,
    design_matrix,
    evaluate_feature,
    multinomial_pool,
    pixel_pool,
)
from featurechurn.usefulness import (
    UsefulnessScore,
    mlp_usefulness,
    rank_for_elimination,
    regression_usefulness,
)

__version__ = "0.1.0"
