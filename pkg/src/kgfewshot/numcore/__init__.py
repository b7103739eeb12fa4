"""Dense numeric substrate: tensors, tape gradients, parameters, MLPs."""

from .gradcheck import GradCheckReport, NonFiniteLossError, grad_check, relative_error
from .nn import MlpSpec, mlp_forward, mlp_init, mlp_param_names
from .optim import SGD
from .params import (ConfigurationError, ParameterFormatError, ParameterStore,
                     uniform_init)
from .tensor import (LAYERNORM_EPS, DimensionError, StaleTapeError, Tensor, add,
                     as_tensor, backward, bce, concat_cols, concat_rows,
                     elementwise, gated_update, gather_rows, grad_enabled,
                     hadamard, layernorm, matmul, mean_all, no_grad, repeat_rows,
                     scale, segment_max, sigmoid, softmax_np, softmax_rows,
                     stable_sigmoid, sub, sub_from_one, sum_all, tanh, transpose)
