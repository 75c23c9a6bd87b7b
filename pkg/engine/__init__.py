from .paths import RunPaths, build_run_paths
from .runtime import get_runtime_info

__all__ = [
    "RunPaths",
    "build_run_paths",
    "get_runtime_info",
]
