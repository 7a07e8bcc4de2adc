"""Desk-scale autoregressive ocean forecasting with mixture-of-time routing."""

__version__ = "0.1.0"

from .data import (OceanNormalizer, SampleWindow, SeriesStore, SyntheticRecipe, compute_norm_stats,
                   default_recipe, export_store, generate_synthetic, ingest_raw, make_window)
from .estimator import MoTForecaster
from .evaluate import (ForecastRun, InferenceModel, SparseObsGridder, SparseObsSet, daily_average,
                       evaluate, grid_sparse_obs, rollout, run_ablation)
from .grid import (ChannelLayout, GridSpec, LandSeaMask, apply_mask, build_channel_layout,
                   latitude_weights, regular_grid)
from .mot import MixtureOfTime, SelectionMatrix, merge_candidates, topk_select, update_selection
from .net import ForecastNet, NetConfig
from .objectives import (LossConfig, channel_candidate_mae, charbonnier_loss, latitude_rmse,
                         multi_step_loss)
from .train import TrainConfig, Trainer, finetune, load_checkpoint, lr_at, pretrain, save_checkpoint
