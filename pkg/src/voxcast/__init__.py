"""voxcast: demand forecasting by searched tabular-to-voxel embeddings and 3D CNNs."""

from . import errors
from .baselines import BaselineKind, run_baseline
from .embedding import (
    CandidateMappingSpace,
    EmbeddingParams,
    LevelClustering,
    VoxelImage,
    cluster_levels,
    derive_embedding,
    enumerate_candidates,
    mixed_embed,
    voxelize,
)
from .metrics import (
    ForecastResult,
    MetricReport,
    compare_models,
    mae,
    minmax_accuracy,
    rmse,
)
from .panel import (
    DemandPanel,
    FeatureSchema,
    FoldSplit,
    SyntheticSpec,
    generate_synthetic,
    impute_missing,
    ingest_panel,
    make_folds,
    normalize,
    remove_outliers,
)
from .search import (
    BilevelConfig,
    EmbeddingSettings,
    gradient_check,
    run_search,
    search_step,
    train_derived,
)
from .selection import (
    ItemGroup,
    SelectionProblem,
    SelectionResult,
    brute_force_oracle,
    cluster_items,
    solve_selection,
    solve_selection_robust,
)
from .supernet import (
    ArchParams,
    Genotype,
    OpKind,
    Supernet,
    SupernetConfig,
    derive_genotype,
)

__version__ = "0.1.0"
