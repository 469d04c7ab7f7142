"""Query-budgeted black-box evasion of malware detectors over an abstract Android app model."""

__version__ = "0.1.0"
