"""poolad: dynamic model-pool ensembling for multivariate time-series
anomaly detection.

Pipeline: a pool of dimension-independent segment reconstruction models is
built over multiple training series (parameter transfer + diversity-aware
loss), gated by a meta-model that decides per input whether to reuse a
matched subset or grow the pool, compacted by parameter-space merging, and
ensembled via thirteen unsupervised proxy-metric rankings aggregated with
Top-k Borda counting into a thresholded anomaly score.
"""

__version__ = "0.1.0"

from .config import Config
from .data import AnomalySpec, TimeSeries, inject_anomaly, load_csv, normalize, segment
from .detect import (auc_pr, identify, range_auc_pr, threshold_epsilon,
                     threshold_mean_std, threshold_percentile, vus_pr)
from .ensemble import borda_topk, ensemble_scores, score_models
from .merge import MergePolicy, dissimilarity, merge_round, plan_merges
from .meta import ExpansionPolicy, MetaModel, MetaStore, match_models, train_meta
from .model import ReconModel, TrainConfig, diversity, mse_loss, pool_loss, train
from .pool import ModelPool, construct_pool, fingerprint, load_pool, probe_series, save_pool
