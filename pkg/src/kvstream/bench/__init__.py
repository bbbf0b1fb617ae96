from .harness import StreamMetrics, check_properties, emit, run_benchmark, strip_wall_time
from .workload import WorkloadConfig, gen_workload, iter_workload

__all__ = [
    "StreamMetrics",
    "WorkloadConfig",
    "check_properties",
    "emit",
    "gen_workload",
    "iter_workload",
    "run_benchmark",
    "strip_wall_time",
]
