"""Attention scores versus mutual information: a small numpy toolkit.

Models (three encoders x three attention mechanisms) are trained with a
built-in reverse-mode autodiff engine; the analysis side groups hidden
representations by attention rank, quantizes them with k-means and
compares the per-rank mutual information with the mean attention via a
weighted Kendall correlation.
"""

from .analysis import (AnalysisConfig, AnalysisReport, AttentionRecord, analyze, attention_entropy, capture,
                       fit_quantizer, mutual_information, permutation_baseline, rank_group, select_k,
                       weighted_kendall)
from .data import (DatasetSplit, Example, generate_distractor_task, generate_planted_token, generate_symmetric_task,
                   load_jsonl, make_dataset)
from .divergences import jsd, kl, tvd
from .errors import (AnalysisError, AttnMIError, ConfigurationError, IngestionError, InvalidInputError, ShapeError,
                     TrainingError)
from .experiments import ExperimentManifest, GridSummary, compare, emit_plot_data, run
from .models import Model, ModelConfig
from .trainer import TrainConfig, TrainReport, train, train_adversarial, train_fix_attn, train_fix_rep, train_normal

__version__ = "0.1.0"
