"""Self-supervised pre-training of deep GRU networks for few-shot RUL estimation
on synthetic fatigue-crack strain data."""

__version__ = "0.1.0"
