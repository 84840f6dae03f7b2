"""Linear-time cell-set aggregation and tissue-cell interaction on a numpy autodiff core."""

__version__ = "0.1.0"
