"""Double-batch KSVD dictionary learning."""

from .core import (
    SparseCodeMatrix,
    TrainingConfig,
    load_codes,
    load_matrix,
    normalize_columns,
    store_codes,
    store_matrix,
)
from .driver import DataSource, encode, fit, initialize_dictionary
from .encoder import build_gram_cache, encode_batch, encode_one
from .matryoshka import make_layout, matryoshka_iteration
from .metrics import coherence_report, mean_relative_error, variance_explained, welch_bound
from .updater import inner_batched_update, top_singular_pair, update_atom

__version__ = "0.1.0"
