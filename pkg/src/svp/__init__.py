"""Style-prior conditioned talking-head video diffusion, desk scale.

The package trains a probabilistic intrinsic-style encoder contrastively on
paired expression/audio sequences and a style-conditioned latent-diffusion
video generator in three stages, validated end to end on a synthetic
cartoon-face corpus whose ground truth an oracle can decode exactly.
"""

__version__ = "0.1.0"

from .config import (ContrastiveConfig, CorpusConfig, DiffusionConfig,
                     RunConfig, StageConfig, StyleEncoderConfig)
from .errors import (ConfigError, ContractError, DataError, NumericError,
                     SvpError)

__all__ = [
    "__version__",
    "RunConfig", "CorpusConfig", "StyleEncoderConfig", "ContrastiveConfig",
    "DiffusionConfig", "StageConfig",
    "SvpError", "ConfigError", "ContractError", "DataError", "NumericError",
]
