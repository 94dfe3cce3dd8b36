"""s3moe: three-stage mixture-of-experts multimodal representation learning."""

__version__ = "0.1.0"
