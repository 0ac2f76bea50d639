"""Route-level radio map prediction from ground crowdsourced measurements.

Subpackages cover the full chain: procedural urban scenes (`geoscene`),
a deterministic propagation surrogate producing 3-D RSRP voxel grids
(`propsim`), observation synthesis and masking (`datasets`), the
dual-transmitter encoder/decoder network with a domain discriminator
(`neural`), the three-stage training pipeline (`pipeline`), classical
interpolation baselines (`baselines`), the route-RMSE evaluation
protocol (`evaluate`), and a reproducible command-line driver (`cli`).
"""

__version__ = "0.1.0"
