"""Parameter-efficient fine-tuning of point-cloud transformers on a NumPy autodiff core."""

__version__ = "0.1.0"
