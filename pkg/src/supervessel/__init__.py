"""High-resolution vessel segmentation from low-resolution input.

Training pairs a segmentation decoder with an auxiliary super-resolution
decoder behind a shared encoder; a feature interaction module couples the
two outputs. Test-phase inference keeps only the segmentation branch.
"""

from .data import (DatasetManifest, SamplePair, SyntheticConfig, builtin_template,
                   generate_synthetic, load_manifest, load_samples,
                   materialize_dataset, simulate_lr, to_onehot)
from .engine import (AblationFlags, RunLog, TrainConfig, TrainResult,
                     build_from_train_config, evaluate, evaluate_pairs, poly_lr,
                     run_ablation, train)
from .errors import (CheckpointError, ConfigurationError, DivergenceError,
                     ManifestError, ShapeError, ValidationError)
from .losses import (LossConfig, LossReport, fim_loss, seg_loss, sr_loss, ssim,
                     total_loss)
from .metrics import (ConfusionCounts, MetricsReport, aggregate, auc, confusion,
                      scalar_metrics)
from .model import (FIM, ModelConfig, SuperVessel, SuperVesselOutputs, UFD,
                    build_model, channel_shuffle, count_parameters,
                    load_checkpoint, save_checkpoint, strip_for_test)

__version__ = "0.1.0"
