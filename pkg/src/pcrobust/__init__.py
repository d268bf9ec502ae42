"""Point-cloud adversarial robustness workbench."""

from .attacks import (
    AttackOutcome,
    BlackBoxConfig,
    CWConfig,
    L2AttackConfig,
    LinfAttackConfig,
    bpda_pipeline_attack,
    cw_l2_targeted,
    evolution_attack,
    fgsm,
    gather_adaptive_attack,
    mim,
    pgd_l2,
    pgd_linf,
    score_blackbox_attack,
)
from .backbones import BackboneSpec, Classifier, init_model, make_spec
from .defenses import DefendedPipeline, KeepMask, PipelineSpec, SORConfig, sor_denoise, upsample
from .estimator import PointCloudClassifier, SOROutlierFilter
from .meshdata import (
    LabeledDataset,
    PointCloud,
    TriangleMesh,
    normalize_unit_cube,
    parse_off,
    sample_surface,
    serialize_off,
    synth_dataset,
)
from .pooling import PoolSpec, init_pool_params, pool_backward, pool_forward
from .training import (
    AttackPlan,
    Checkpoint,
    EvalReport,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
