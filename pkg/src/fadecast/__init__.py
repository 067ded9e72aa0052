"""Retrieval-based lithium-ion capacity-fade forecasting.

Simulates a bank of physics-derived fade curves, trains a contrastive
dual-encoder that matches operational battery histories to simulated curves,
and serves retrieval forecasts with uncertainty bands and degradation-mode
diagnosis.
"""

from .degradation import (
    DegradationParams,
    ModeReport,
    SimCurve,
    SimState,
    derivatives,
    quantify_modes,
    simulate,
)
from .errors import FadecastError

__version__ = "0.1.0"

__all__ = [
    "DegradationParams",
    "FadecastError",
    "ModeReport",
    "SimCurve",
    "SimState",
    "derivatives",
    "quantify_modes",
    "simulate",
    "__version__",
]
