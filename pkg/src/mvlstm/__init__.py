"""Mode variational LSTM: cells, exact BPTT, synthetic unseen-mode benchmark and static-sequence probe."""

__version__ = "0.1.0"
