"""Fine-tuning bridge: config emission, dataset validation, launch."""

__version__ = "0.1.0"
