"""3D spatial-transcriptomics imputation on serial sections."""

__version__ = "0.1.0"
