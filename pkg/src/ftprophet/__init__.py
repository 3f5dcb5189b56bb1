"""Online conversion-rate prediction under delayed feedback.

Library layout:

* :mod:`ftprophet.core`      - record/schedule/clock types and label semantics
* :mod:`ftprophet.datagen`   - synthetic streams with an analytic oracle
* :mod:`ftprophet.ingest`    - Criteo and canonical log parsing, feature hashing
* :mod:`ftprophet.model`     - manual-gradient networks, Adam, grad checks
* :mod:`ftprophet.pipelines` - matured/fake-negative/extended-log pipelines
* :mod:`ftprophet.learners`  - ftp, prophet, waiting, fnw, fnc, pu
* :mod:`ftprophet.sim`       - the hour-stepped simulation loop and metrics
* :mod:`ftprophet.cli`       - run/gen/stats/besttask entry points
"""

from .core import (
    ImpressionRecord,
    SimClock,
    Split,
    TaskSchedule,
    final_label,
    matured_subset,
    observed_label,
)
from .datagen import (
    DelayMixture,
    GeneratorConfig,
    StreamOracle,
    generate_stream,
    generate_stream_with_oracle,
    true_cvr,
)
from .ingest import FeatureHasher, ParseError, hash_features, parse_criteo_line
from .learners import Hyper, LearnerSpec, fnc_calibrate, fnw_loss, pu_loss
from .model import (
    Adam,
    ModelConfig,
    PredictionBundle,
    SharedBottomNet,
    SingleHeadNet,
    bce_loss_and_grad,
    grad_check,
)
from .pipelines import (
    ExtendedLog,
    FakeNegativePipeline,
    MaturedPipeline,
    StreamArrays,
    emit_fake_negative_stream,
    policy_batch,
)
from .sim import SimConfig, SimReport, auc, best_task_stats, log_loss, run_simulation

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "DelayMixture",
    "ExtendedLog",
    "FakeNegativePipeline",
    "FeatureHasher",
    "GeneratorConfig",
    "Hyper",
    "ImpressionRecord",
    "LearnerSpec",
    "MaturedPipeline",
    "ModelConfig",
    "ParseError",
    "PredictionBundle",
    "SharedBottomNet",
    "SimClock",
    "SimConfig",
    "SimReport",
    "SingleHeadNet",
    "Split",
    "StreamArrays",
    "StreamOracle",
    "TaskSchedule",
    "auc",
    "bce_loss_and_grad",
    "best_task_stats",
    "emit_fake_negative_stream",
    "final_label",
    "fnc_calibrate",
    "fnw_loss",
    "generate_stream",
    "generate_stream_with_oracle",
    "grad_check",
    "hash_features",
    "log_loss",
    "matured_subset",
    "observed_label",
    "parse_criteo_line",
    "policy_batch",
    "pu_loss",
    "run_simulation",
    "true_cvr",
]
