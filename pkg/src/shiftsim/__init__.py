"""Deterministic multi-device LLM inference simulator.

The simulator executes a small transformer over P simulated devices and
can switch between tensor parallelism and sequence parallelism on every
forward pass while sharing one mode-invariant KV cache. On top of the
engine sit an early-exit prefill path, suffix-based speculative decoding,
and a continuous-batching serving loop driven by a simulated clock.
"""

from .parallel_engine import (
    Batch,
    BatchItem,
    BatchKind,
    Engine,
    ParallelMode,
    Sequence,
    ShiftPolicy,
    StepRecord,
    choose_mode,
    default_token_threshold,
)
from .config import RunConfig
from .errors import CacheOverflow, ConfigError, ContractViolation
from .fabric import CollectiveKind, DeviceGroup
from .flops import FlopCount, FlopMeter, PassShape, flop_count
from .kv_cache import KvCache, LayoutFingerprint
from .model import (
    ModelConfig,
    ModelWeights,
    forward_reference,
    greedy_token,
    induction_weights,
    init_weights,
    memory_report,
    reference_greedy,
)
from .serving import (
    CostModel,
    LengthSampler,
    PhaseSpec,
    Request,
    RequestMetrics,
    RequestState,
    ServingResult,
    StepLogEntry,
    TraceEntry,
    TrafficProfile,
    generate_trace,
    materialize_prompt,
    read_trace,
    run_serving_loop,
    summarize,
    write_metrics_csv,
    write_step_log,
    write_summary,
    write_trace,
)
from .spec_decode import (
    DraftResult,
    SpecStats,
    SpeculationConfig,
    SuffixIndex,
    decode_with_speculation,
    propose,
    verify_and_accept,
)
from .swiftkv import SwiftKvConfig, prefill_swiftkv, swiftkv_flop_ratio
from .tensor_core import Precision, matmul
from .verify_checks import run_verify

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BatchItem",
    "BatchKind",
    "CacheOverflow",
    "CollectiveKind",
    "ConfigError",
    "ContractViolation",
    "CostModel",
    "DeviceGroup",
    "DraftResult",
    "Engine",
    "FlopCount",
    "FlopMeter",
    "KvCache",
    "LayoutFingerprint",
    "LengthSampler",
    "ModelConfig",
    "ModelWeights",
    "ParallelMode",
    "PassShape",
    "PhaseSpec",
    "Precision",
    "Request",
    "RequestMetrics",
    "RequestState",
    "RunConfig",
    "Sequence",
    "ServingResult",
    "ShiftPolicy",
    "SpecStats",
    "SpeculationConfig",
    "StepLogEntry",
    "StepRecord",
    "SuffixIndex",
    "SwiftKvConfig",
    "TraceEntry",
    "TrafficProfile",
    "choose_mode",
    "decode_with_speculation",
    "default_token_threshold",
    "flop_count",
    "forward_reference",
    "generate_trace",
    "greedy_token",
    "induction_weights",
    "init_weights",
    "matmul",
    "materialize_prompt",
    "memory_report",
    "prefill_swiftkv",
    "propose",
    "read_trace",
    "reference_greedy",
    "run_serving_loop",
    "run_verify",
    "summarize",
    "swiftkv_flop_ratio",
    "verify_and_accept",
    "write_metrics_csv",
    "write_step_log",
    "write_summary",
    "write_trace",
    "__version__",
]
