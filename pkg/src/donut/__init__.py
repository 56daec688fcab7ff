"""Average treatment effect estimation with orthogonal regularization."""

from .datasets import CsvSchema, Dataset, ScalerParams, SimSpec, Split, kl_bias, load_csv, simulate, split, standardize, write_csv
from .estimators import EstimateReport, closed_form_ate, diff_in_means, donut_ate, estimate, ols1_ate, ols2_ate, plr_ate
from .loss import LossConfig, Objective, orthogonality_residual, pseudo_ate
from .experiments import DESK_TRAIN_CONFIG, AggregateResult, ExperimentSpec, run, run_ablation, run_bias_sweep, run_csv_eval, run_lambda_sweep, write_outputs
from .metrics import eps_ate_mu, eps_ate_y, eps_att
from .model import DonutModel, ModelConfig
from .training import TrainConfig, TrainResult, select_lambda, train

__version__ = "0.1.0"
