"""Block-filtered posterior sampling for Gaussian-emission hidden Markov models."""
from .combine import CombineSpec, CombinedDraws, baseline_dpmc, baseline_pie, baseline_wasp, combine
from .em import EmConfig, baum_welch
from .experiment import ExperimentConfig, ResultTable, ingest_series, run_experiment
from .hmm_core import (
    HmmModel,
    MixingInputs,
    choose_k,
    forward_filter,
    loglik,
    max_subsets_advisory,
    mixing_coefficient,
    one_block_conditional_loglik,
    benchmark_model,
    simulate,
    stationary_distribution,
)
from .metrics import accuracy_1d, accuracy_report, normal_tv_bound, w1_1d
from .partition import Partition, block_with_context, partition
from .sampler import DrawSet, PriorSpec, SamplerConfig, prediction_filter_weights, run_subset_sampler

__version__ = "0.1.0"
