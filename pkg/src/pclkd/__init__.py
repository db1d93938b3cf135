"""Peer collaborative online distillation on a small numpy autodiff engine."""
from .config import RunConfig, load_config
from .data import Dataset, load_cifar10, make_synthetic, make_views
from .losses import (peer_ce_loss, peer_ensemble_distill, peer_mean_distill, ramp_up, soften,
                     teacher_ce_loss, total_loss)
from .model import (Architecture, MeanTeacherBank, MultiBranchModel, build_model, forward_ensemble_teacher,
                    forward_mean_teachers, forward_peers, smoothing_coefficient)
from .tensor import Tensor, no_grad
from .train import branch_variance, evaluate, train

__version__ = "0.1.0"
