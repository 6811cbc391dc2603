"""Self-knowledge-distillation self-supervised learning on a small numpy autodiff engine."""

from .errors import (ConfigError, ContractError, DataError, FormatError, InputError, IoError,
                     MetricError, NumericError, ShapeError, SkdError, ZeroNormError)

__version__ = "0.1.0"
