"""Hand-rolled differentiable building blocks and the dual-stream network.

Tensors are plain float64 numpy arrays shaped (batch, channel, x, y, z);
gradients travel in parallel dicts keyed by parameter name.  Every primitive
implements an explicit backward pass for the one fixed architecture used
here — there is no general-purpose graph engine — and each ships with a
finite-difference check (see :mod:`routecast.neural.gradcheck`).
"""

from .model import (  # noqa: F401
    ArchSpec,
    DualTxModel,
    cbam,
    decode,
    discriminate,
    encode,
    load_model,
    save_model,
)
from .gradcheck import grad_check  # noqa: F401
