"""Desk-scale auto-context liver segmentation toolkit."""

from .autodiff import Tensor, backward, parameter
from .data import (ContourImage, FoldPlan, LabelVolume, Volume,
                   extract_contour, make_phantom, plan_folds, random_affine,
                   read_volume, resample, window_normalize, write_volume)
from .errors import (CheckpointFormatError, ConfigurationError,
                     DimensionError, NumericError, UndefinedMetricError,
                     UsageError, VolumeFormatError)
from .estimator import AutoCENetSegmenter
from .losses import (LossWeights, contour_weight_map, full_contour_loss,
                     liver_prior_loss, manual_selfsup_contour_loss,
                     max_pool_label, penalized_contour_loss, soft_dice_loss,
                     total_loss)
from .metrics import (MetricsReport, SurfacePointSet, assd, confusion_counts,
                      evaluate, extract_surface, f1_precision_sensitivity,
                      hausdorff, percent_reduction, read_report_csv,
                      write_report_csv)
from .network import (ABLATIONS, AutoCENet, NetworkConfig, NetworkOutputs,
                      apply_ablation, build, desk_config, load_checkpoint,
                      read_checkpoint, save_checkpoint)
from .train import (Case, MomentOptimizer, RunRecord, TrainConfig,
                    desk_train_config, evaluate_run, hard_dsc, nfold_study,
                    phantom_cases, train)

__version__ = "0.1.0"
