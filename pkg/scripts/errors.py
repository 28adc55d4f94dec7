#!/usr/bin/env python3
"""
Exception types shared by the PLDA scripts
"""

from typing import Optional


class PLDAError(Exception):
    """Base class for every error raised by the PLDA scripts"""


class ConfigError(PLDAError, ValueError):
    """Invalid configuration value; `field` names the offending setting"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(PLDAError, ValueError):
    """Tensor shape or index does not match what an operation expects"""


class DatasetError(PLDAError, ValueError):
    """Dataset is empty, unreadable or inconsistent"""


class NonFiniteLossError(PLDAError, RuntimeError):
    """A loss component became NaN or infinite during training"""

    def __init__(self, component: str, value: Optional[float] = None, step: Optional[int] = None):
        self.component = component
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {component} loss{where} (value={value})")


class CheckpointError(PLDAError, ValueError):
    """Checkpoint archive is missing, unreadable or of an unknown format"""
