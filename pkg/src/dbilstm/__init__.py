"""Dilated biLSTM decoding of transient HD-sEMG with subject-embedded transfer learning."""

__version__ = "0.1.0"
