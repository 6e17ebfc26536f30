"""Prior-guided concept prediction from class labels and class-level concept priors."""

__version__ = "0.1.0"
