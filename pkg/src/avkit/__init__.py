"""Non-neural backend for audio-visual speaker verification.

Front-end (MFCC, CMN, energy VAD, resampling), single-channel WPE
dereverberation, LDA/PLDA embedding backend, face template matching,
logistic-regression calibration/fusion and detection metrics, plus a
seeded synthetic-data harness that ties them together.
"""

from .errors import (
    AvkitError,
    ConfigError,
    ContractError,
    DataError,
    MissingScoreError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "AvkitError",
    "ConfigError",
    "ContractError",
    "DataError",
    "MissingScoreError",
    "NumericalError",
    "__version__",
]
