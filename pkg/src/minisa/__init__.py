"""MINISA: a VN-level instruction set, mapper and simulator for the FEATHER+ accelerator."""

from .arch import ArchConfig, eval_config, small_config
from .mapper import chain_search, search
from .workloads import Workload, builtin_suite

__all__ = ["ArchConfig", "Workload", "builtin_suite", "chain_search", "eval_config",
           "search", "small_config"]
__version__ = "0.1.0"
