"""Python access to the neurofuse core: metrics, connectivity graphs,
synthetic data, config hashing and the command line."""

from ._neurofuse import (
    NeurofuseError,
    __version__,
    bh_fdr_reject,
    canonical_config,
    config_hash,
    correlation_pvalues,
    dynamic_graphs,
    generate_dataset,
    gradcheck,
    pearson_matrix,
    pr_auc,
    roc_auc,
    run_cli,
    sliding_windows,
)

__all__ = [
    "NeurofuseError",
    "__version__",
    "bh_fdr_reject",
    "canonical_config",
    "config_hash",
    "correlation_pvalues",
    "dynamic_graphs",
    "generate_dataset",
    "gradcheck",
    "pearson_matrix",
    "pr_auc",
    "roc_auc",
    "run_cli",
    "sliding_windows",
]
