"""Subject-based multi-source domain adaptation.

Each subject is treated as its own domain. Labeled source subjects are
aligned with a Gaussian-kernel MMD loss while training a shared classifier;
an unlabeled target subject is then adapted using augmented confident
pseudo-labels and a source-target discrepancy term. Top-k source selection
ranks subjects by MMD distance to the target.
"""

from .acpl import PseudoLabelSet, TauSchedule, predict_pair, select_confident, tau_at
from .data import (
    Benchmark,
    DataSpec,
    SubjectDomain,
    SubjectSpec,
    augment_hflip,
    generate_subject,
    load_subject_dir,
    make_benchmark,
    merge_domains,
    sample_multi_domain_batch,
    strip_labels,
    write_subject_dir,
)
from .errors import ShapeError, TrainingError, ValidationError
from .harness import (
    ExperimentConfig,
    ablation_pl,
    ablation_scaling,
    load_experiment_config,
    run_experiment,
)
from .mmd import (
    KernelConfig,
    MmdEstimate,
    gaussian_kernel,
    median_heuristic,
    mmd_biased,
    mmd_gradient,
    pairwise_source_mmd,
    rank_sources_by_mmd,
    source_target_mmd,
)
from .nn_core import (
    AffineLayer,
    GradientSet,
    ModelState,
    backward,
    cross_entropy,
    forward_features,
    forward_logits,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    softmax,
)
from .trainer import (
    Metrics,
    TrainConfig,
    adapt_target,
    evaluate,
    run_protocol,
    train_source_alignment,
)

__version__ = "0.1.0"
