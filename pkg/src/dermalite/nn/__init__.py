from .layers import (activation_backward, activation_forward, batchnorm_backward,
                     batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
                     dense_forward, maxpool2_backward, maxpool2_forward, softmax, softmax_xent)
from .network import (PAPER_PARAM_REFERENCE, NetworkConfig, NetworkParams, init_params,
                      param_count, param_shapes)
from .optim import AdamState, adam_step
