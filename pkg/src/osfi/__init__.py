"""Open-set identification with few-shot galleries.

Weight-imprinted classifiers, BatchNorm-only fine-tuning of a small numpy
encoder, the Neighborhood Aware Cosine matcher, and DIR@FAR evaluation.
"""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DegenerateInputError, NumericalError, OSFIError,
                     ParseError, ProtocolError)
from .geometry import PrototypeSet, build_prototypes, l2_normalize
from .matcher import MatcherConfig, score_cosine, score_nac
from .evaluation import dir_at_far, dir_curve
