"""Asynchronous federated learning with differentially private gradients."""

from .config import RunConfig
from .data import DatasetSpec
from .engine import DelaySchedule, run
from .kernels import BACKEND
from .record import RunRecord

__all__ = ["RunConfig", "DatasetSpec", "DelaySchedule", "run", "RunRecord", "BACKEND"]
__version__ = "0.1.0"
