"""Quality-gated lung-ultrasound-like frame classification pipeline."""

__version__ = "0.1.0"
