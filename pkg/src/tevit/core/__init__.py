from tevit.core.errors import ConfigError, ContractError, DimensionError, NumericError, TevitError
from tevit.core.flops import FlopCounter, count_flops
from tevit.core.gradcheck import finite_diff_check
from tevit.core.optim import AdamWState, adamw_step, clip_grad_norm
from tevit.core.tensor import GradTape, Tensor, backward, no_grad, parameter
