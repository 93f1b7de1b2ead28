"""Post-processing of separated music sources with an adversarially trained waveform U-Net."""

__version__ = "0.1.0"
