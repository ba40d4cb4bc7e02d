"""Model-agnostic meta-learning with weights constrained to the Stiefel manifold."""

from .autodiff import Graph, NonFiniteError, RankDeficientError, ShapeError, backward_grads, forward_eval, qr_backward, qr_thin
from .harness import RunConfig, compare_methods, compute_ci95, run_experiment
from .kernel import KernelParams, gram_matrix, kernel, kernel_loss, kernel_loss_grad
from .meta import MetaConfig, evaluate, inner_adapt, meta_gradient, meta_step
from .model import MLP, ModelConfig, Param, ParamSet, init_params, load_params, save_params
from .stiefel import StiefelPoint, TangentVector, chordal_distance, project_tangent, random_point, random_tangent, retract_qr
from .tasks import GaussianFamily, SinusoidFamily, Task, load_folder_dataset, sample_folder_task, sample_gaussian_task, sample_sinusoid_task

__version__ = "0.1.0"
