"""Joint audio/motion generation with flow matching at desk scale.

Two diffusion-transformer streams, one per modality, are trained with
inpainting-style conditional flow matching on a synthetic coupled
corpus; their first layers exchange information through joint
attention over pooled keys with rescaled rotary positions and
asymmetric cross-stream masks.
"""

from . import attention, data, dit, flow, numerics, rng, rope
from .dit import JamModel, ModelConfig, forward_jam
from .flow import SamplerConfig, SamplingConditions, euler_sample, sample_pair
from .numerics import Tensor

__version__ = "0.1.0"

__all__ = [
    "attention", "data", "dit", "flow", "numerics", "rng", "rope",
    "JamModel", "ModelConfig", "forward_jam",
    "SamplerConfig", "SamplingConditions", "euler_sample", "sample_pair",
    "Tensor", "__version__",
]
