"""Retrieval-augmented language modeling toolkit.

A self-contained implementation of the nearest-neighbor language model
inference stack - datastore, IVF/PQ approximate search, neighbor
distributions, interpolation - together with the three efficiency levers:
a learned retrieval gate, datastore pruning (random / token-conditioned
k-means / greedy merging / importance ranking), and PCA key compression.
"""

from .adaptor import (
    AdaptorDataset,
    AdaptorNet,
    AdaptorTrainConfig,
    FeatureVector,
    adaptive_predict,
    adaptor_forward,
    adaptor_loss_and_grad,
    extract_features,
    load_adaptor,
    save_adaptor,
    select_lambda_threshold,
    train_adaptor,
)
from .config import PipelineConfig, config_hash, load_config
from .corpus import Vocabulary, read_corpus, write_corpus
from .datastore import (
    Datastore,
    DatastoreRecord,
    build_datastore,
    datastore_stats,
    load_datastore,
    save_datastore,
)
from .distribution import (
    SparseDist,
    interpolate,
    knn_distribution,
    weighted_knn_distribution,
)
from .errors import ConfigError, FormatError, InvalidInputError, KnnlmError
from .harness import (
    EvalReport,
    bench_speed,
    build_adaptor_dataset,
    evaluate,
    evaluate_mode,
    run_ablation_grid,
    tune_lambda,
)
from .index import (
    FlatSearcher,
    IvfIndex,
    IvfSearcher,
    NeighborHit,
    PqCodebook,
    attach_pq,
    flat_search,
    ivf_search,
    load_index,
    pq_distance,
    save_index,
    train_ivf,
)
from .pruning import (
    PruneReport,
    greedy_merge,
    importance_scores,
    kmeans_prune,
    random_prune,
    rank_prune,
)
from .reduction import PcaTransform, apply_transform, fit_pca, random_rotation, reduce_datastore
from .reference_lm import (
    ContextEncoder,
    CountLM,
    ReferenceLm,
    StepOutput,
    SuffixTables,
    build_reference_lm,
    build_suffix_tables,
    encode_context,
    fit_count_lm,
    lm_step,
)
from .synthetic import ToyBenchmark, make_toy_benchmark

__version__ = "0.1.0"
