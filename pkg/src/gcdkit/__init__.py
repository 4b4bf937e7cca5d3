"""gcdkit: active-learning generalized category discovery over embeddings.

The pipeline trains a small projection head over frozen input embeddings.
Each refresh it clusters the pool, finds each sample's nearest neighbors,
selects the samples whose neighborhoods disagree with their own cluster
assignment (and whose assignment distribution is near-uniform), asks an
oracle which candidate neighbor matches each selected sample, and pulls
samples toward their confirmed or randomly drawn neighbors with a
contrastive loss. Novel clusters are then decoupled from the known ones
and named through the same oracle.
"""

from .clustering import ClusterModel, estimate_k, kmeans
from .config import (
    PAPER_DEFAULTS,
    ConfigError,
    OracleSpec,
    RunConfig,
    SyntheticSpec,
    build_dataset,
    build_oracle,
    build_run_config,
    reference_synthetic_spec,
    reference_train_config,
)
from .data import (
    DatasetBundle,
    DatasetError,
    EmbeddedSample,
    gen_synthetic,
    load_jsonl,
    make_gcd_split,
    save_jsonl,
)
from .evaluation import EvalReport, evaluate, hungarian
from .interpretation import (
    ClusterInterpretation,
    InterpretationResult,
    decouple_novel,
    name_clusters,
    representatives,
)
from .oracle import (
    ABSTAIN,
    CacheStore,
    HttpOracle,
    MockOracle,
    NoisyMockOracle,
    OracleAnswer,
    OracleError,
    OracleExchange,
    ask,
    ask_name,
    build_exchange,
    build_interpret_prompt,
    build_query_prompt,
    candidate_clusters,
    effective_text,
    make_cache_key,
    parse_choice,
    pick_candidate_sample,
    prompt_tokens,
)
from .sampling import (
    NeighborIndex,
    SamplingScores,
    SelectionSet,
    STRATEGIES,
    build_knn,
    compute_scores,
    cosine_sim,
    entropy,
    local_inconsistency,
    select,
    select_confidence,
    select_entropy,
    select_margin,
    select_random,
    select_strategy,
    soft_assign,
)
from .training import (
    Adam,
    NeighborAssignment,
    NumericError,
    ProjectionHead,
    TrainConfig,
    assign_neighbors,
    augment,
    ce_loss,
    contrastive_objective,
    forward,
    rncl_loss,
    run_loop,
)

__version__ = "0.1.0"
