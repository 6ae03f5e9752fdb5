"""Ghost modules, DFC attention and GhostNetV2 on a small NumPy autodiff core."""

from .attention import (
    DecoupledWeights,
    DfcBranch,
    DfcConfig,
    FullAttentionWeights,
    dfc_attention_conv,
    dfc_attention_general,
    dfc_branch,
    full_fc_attention,
    lift_conv_to_general,
)
from .backbone import GhostNetV2, ModelSpec, build_model, load_spec
from .blocks import BottleneckConfig, GhostBottleneck, GhostModule, ghost_module, ghost_module_attn, ghostv2_bottleneck
from .gradcheck import GradCheckReport, grad_check
from .ops import ConvKernel
from .tensor import Tape, Tensor, backward, count_macs

__version__ = "0.1.0"
