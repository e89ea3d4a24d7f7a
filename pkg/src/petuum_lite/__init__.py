"""petuum_lite: a desk-scale parameter server and model-parallel scheduler."""
from .consistency import VectorClock, min_clock, ssp_read_permitted, tick
from .exceptions import (
    ContractViolation, ConvergenceError, PetuumError, ProtocolError, RunAborted,
    ServerShutdown, UsageError,
)
from .param_server import AGGREGATOR, ParamServer, TableSpec, UpdateBatch
from .runtime import AppContract, MetricsRecord, MetricsSeries, RunConfig, StopRule, run, start
from .scheduler import CorrelationIndex, PriorityState, ScheduleDecision, Scheduler

__version__ = "0.1.0"

__all__ = [
    "AGGREGATOR", "AppContract", "ContractViolation", "ConvergenceError", "CorrelationIndex",
    "MetricsRecord", "MetricsSeries", "ParamServer", "PetuumError", "PriorityState",
    "ProtocolError", "RunAborted", "RunConfig", "ScheduleDecision", "Scheduler",
    "ServerShutdown", "StopRule", "TableSpec", "UpdateBatch", "UsageError", "VectorClock",
    "min_clock", "run", "ssp_read_permitted", "start", "tick",
]
