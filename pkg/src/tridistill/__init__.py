"""Pre-train one network, extract many sizes.

A teacher/student self-distillation loop where each step also trains a
randomly sampled sub-network that shares storage with the full student.
After pre-training, any cell of the width/depth lattice can be sliced
out of the teacher as a standalone network, no fine-tuning required.
"""

from .augment import AugmentConfig, ViewBatch, augment
from .backbones import BackboneSpec, NetGeometry, forward, full_geometry, sub_geometry
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_to_store,
    load_checkpoint,
    save_checkpoint,
    store_to_checkpoint,
)
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import ShapesConfig, load_npz, make_shapes, save_npz, split_even_odd
from .estimators import CosineKNN, ElasticPretrainer, SoftmaxProbe
from .evalkit import (
    LabeledFeatures,
    SweepReport,
    knn_eval,
    labeled_features,
    linear_probe,
    pooled_features,
    robustness_probe,
    sweep,
)
from .grids import (
    ElasticGrid,
    SamplerConfig,
    SubNetId,
    SubnetSampler,
    block_ids,
    depth_of,
    enumerate_ids,
    sample_prob,
    width_of,
)
from .heads import HeadsConfig, head_forward
from .losses import koleo, loss_elastic, loss_intact, loss_total, sk_center, teacher_probs
from .schedules import SchedConfig, momentum_at, teacher_temp_at, wd_at
from .slicing import ParamStore, SubNetView, extract_arrays, materialize, standalone_store, subnet_spec
from .trainer import TrainingDiverged, TrainState, lr_at, run_pretrain, train_step

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "BackboneSpec",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "CosineKNN",
    "ElasticGrid",
    "ElasticPretrainer",
    "HeadsConfig",
    "LabeledFeatures",
    "NetGeometry",
    "ParamStore",
    "RunConfig",
    "SamplerConfig",
    "SchedConfig",
    "ShapesConfig",
    "SoftmaxProbe",
    "SubNetId",
    "SubNetView",
    "SubnetSampler",
    "SweepReport",
    "TrainState",
    "TrainingDiverged",
    "ViewBatch",
    "augment",
    "block_ids",
    "checkpoint_to_store",
    "depth_of",
    "enumerate_ids",
    "extract_arrays",
    "forward",
    "full_geometry",
    "head_forward",
    "knn_eval",
    "koleo",
    "labeled_features",
    "linear_probe",
    "load_checkpoint",
    "load_config",
    "load_npz",
    "loss_elastic",
    "loss_intact",
    "loss_total",
    "lr_at",
    "make_shapes",
    "materialize",
    "momentum_at",
    "parse_config",
    "pooled_features",
    "robustness_probe",
    "run_pretrain",
    "sample_prob",
    "save_checkpoint",
    "save_npz",
    "sk_center",
    "split_even_odd",
    "standalone_store",
    "store_to_checkpoint",
    "sub_geometry",
    "subnet_spec",
    "sweep",
    "teacher_probs",
    "teacher_temp_at",
    "train_step",
    "wd_at",
    "width_of",
]
