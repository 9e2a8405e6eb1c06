"""Multi-step in-context retrieval: synthetic tasks, a small numpy transformer,
training sweeps, circuit analysis, an information-flow model and a text benchmark."""

__version__ = "0.1.0"
