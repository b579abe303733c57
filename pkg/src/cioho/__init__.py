"""Graph-based multi-agent learning of handover offsets, with simulator, baselines and harness."""

__version__ = "0.1.0"
