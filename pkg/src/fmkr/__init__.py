"""Class-balanced meta-learning for multi-stage attack detection on fused flow + syslog data."""

__version__ = "0.1.0"

from fmkr.stages import StageLabel  # noqa: E402

__all__ = ["StageLabel", "__version__"]
