"""fraudformer: autoregressive pretraining and anomaly-detection
fine-tuning for multivariate payment-behavior sequences."""

__version__ = "0.1.0"
