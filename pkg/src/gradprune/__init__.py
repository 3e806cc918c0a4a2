"""gradprune: train CNNs from scratch while progressively pruning filters.

Filters are scored during training by gradient-based criteria, the weakest
are split into a hard-removed and a soft-zeroed set on an exponential
schedule, and the optimizer's momentum state is pruned with the same
indexes so stale history never steers re-initialized weights.
"""

from .config import ConfigError, RunConfig, finalize_config, load_config
from .data import Dataset, batch_iter, load_cifar10_bin, load_mnist_idx, synth_dataset
from .harness import (EpochReport, RunResult, evaluate, finetune, run,
                      run_pgp, run_rpgp, write_run_outputs)
from .models import (ModelGraph, build_lenet5, build_small_resnet,
                     build_small_vgg, propagate_prune)
from .optim import SgdMomentum
from .pruning import (CriterionAccumulator, PrunePlan, PruneSchedule,
                      apply_prune, count_flops, count_params, decay_ratio,
                      score_filters, select_partition, weak_count)

__all__ = [
    "ConfigError", "RunConfig", "finalize_config", "load_config",
    "Dataset", "batch_iter", "load_cifar10_bin", "load_mnist_idx", "synth_dataset",
    "EpochReport", "RunResult", "evaluate", "finetune", "run", "run_pgp",
    "run_rpgp", "write_run_outputs",
    "ModelGraph", "build_lenet5", "build_small_resnet", "build_small_vgg",
    "propagate_prune",
    "SgdMomentum",
    "CriterionAccumulator", "PrunePlan", "PruneSchedule", "apply_prune",
    "count_flops", "count_params", "decay_ratio", "score_filters",
    "select_partition", "weak_count",
]

__version__ = "0.1.0"
