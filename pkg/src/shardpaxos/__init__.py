"""Sharded multi-Paxos: protocol roles, deterministic simulator, safety checker,
and a replicated key-value benchmark harness."""

__version__ = "0.1.0"
