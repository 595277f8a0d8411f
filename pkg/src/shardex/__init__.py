"""Sharded deterministic transaction execution with crash-tolerant replicas."""
from .config import ConfigError, RunConfig
from .model import NodeId, Object, Transaction, make_tx

__all__ = ["ConfigError", "RunConfig", "NodeId", "Object", "Transaction", "make_tx"]
__version__ = "0.1.0"
