"""Figure regeneration for fedroad experiment metrics (read-only consumer
of the metrics.csv schema)."""

from .figures import KINDS, PlotResult, PlotSpec, plot
from .reader import EXPECTED_HEADER, MetricsRow, Run, SchemaError, load_run

__all__ = [
    "KINDS",
    "PlotSpec",
    "PlotResult",
    "plot",
    "Run",
    "MetricsRow",
    "SchemaError",
    "EXPECTED_HEADER",
    "load_run",
]
__version__ = "0.1.0"
