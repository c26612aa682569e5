"""Monthly index-direction prediction with regime features, a shared VAE, and
fine-tuned gradient boosting over an a-priori causal graph."""

from .backtest import (
    BacktestReport,
    MetricsRow,
    SplitPlan,
    compute_metrics,
    fractional_split_plan,
    paper_split_plan,
    run_backtest,
)
from .data import (
    DriverPanel,
    MonthBoundary,
    PriceSeries,
    SyntheticParams,
    generate_synthetic,
    load_drivers,
    load_prices,
    month_boundaries,
    write_drivers,
    write_prices,
)
from .errors import (
    ConfigError,
    IndexcastError,
    MissingArtifactError,
    NumericError,
    ParseError,
    ProtocolError,
    StalenessError,
    TrainingError,
    ValidationError,
)
from .features import (
    ClusterStats,
    FeatureStore,
    NodeFeatures,
    assemble_features,
    build_features,
    cosine_block,
    mahalanobis_block,
    returns_block,
    rolling_cluster_stats,
)
from .gbdt import (
    BoostedModel,
    ExampleSet,
    FineTuneOverrides,
    GbdtConfig,
    fine_tune,
    load_model,
    make_labels,
    save_model,
    train_global,
)
from .graph import (
    CausalGraph,
    NodeSpec,
    Tier,
    adjacency_row,
    default_market_graph,
    load_default_market_graph,
    load_graph,
    save_graph,
    synthetic_graph,
    write_edge_list,
)
from .pipeline import (
    EmbeddingStore,
    PipelineArtifacts,
    PipelineConfig,
    build_examples,
    embed_features,
    run_pipeline,
)
from .regimes import (
    ClusterAssignment,
    Regime,
    RegimeSegment,
    assign_clusters,
    label_regimes,
)
from .vae import (
    NodeEmbedding,
    TrainReport,
    VaeConfig,
    VaeParams,
    embed,
    embed_matrix,
    load_checkpoint,
    save_checkpoint,
    train_vae,
    vae_loss,
)

__version__ = "0.1.0"
