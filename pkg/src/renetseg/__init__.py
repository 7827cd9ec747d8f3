"""Spatially recurrent (ReNet) layers and hybrid segmentation networks in numpy."""

from .autograd import Graph, Tape, grad_check
from .densecrf import CrfParams, argmax_labels, mean_field
from .metrics import EvalReport, evaluate_predictions
from .models import (
    NetworkSpec,
    build_baseline_fcn,
    build_compact_fcn,
    build_compact_hrenet,
    build_hrenet,
    build_nrenet,
    forward_variable_size,
    load_checkpoint,
    save_checkpoint,
)
from .renet import LstmParams, ReNetGroupConfig, ReNetLayerConfig, renet_group, renet_sweep
from .training import SgdConfig, evaluate, init_params, train

__version__ = "0.1.0"
