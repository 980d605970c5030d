"""Multi-task pre-training of a shared decision layer for cooperative multi-agent Q-learning."""

__version__ = "0.1.0"
