"""Foreground-aware stylization and consensus pseudo-labeling for binary
foreground segmentation under domain shift, with a synthetic multi-domain
benchmark suite."""

from .core import (
    DatasetSplit,
    ExperimentConfig,
    LossWeights,
    Sample,
    load_config,
    load_dataset,
    save_config,
    save_dataset,
    seeded_rng,
    substream,
)
from .metrics import IoUReport, evaluate_model, iou, miou
from .stylize import (
    EmptyRegion,
    RegionStats,
    StylePool,
    build_style_adapted_dataset,
    normalize_baseline,
    region_stats,
    stylize_aligned,
    stylize_unaligned,
    wct_transfer,
)
from .model import (
    OptimState,
    SegModel,
    bce_loss,
    load_checkpoint,
    make_optimizer,
    new_model,
    save_checkpoint,
    threshold_predict,
    train_step,
)
from .consensus import (
    PseudoLabelDecision,
    consensus_label,
    cpl_train_epoch,
    naive_pl,
    pseudo_label_sweep,
)
from .adversarial import (
    PixelDiscriminator,
    adv_train_epoch,
    grad_reverse,
    grl_backward,
    grl_forward,
)
from .synth import (
    DomainRecipe,
    generate_domain,
    label_distribution_summary,
    preset_recipes,
    preset_suite,
)
from .pipeline import (
    RunResult,
    RunSpec,
    emit_report,
    replay,
    run,
    run_domain_generalization,
    run_multi_target,
    run_sweep,
)

__version__ = "0.1.0"
