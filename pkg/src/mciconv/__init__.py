"""MCI-to-AD conversion prediction from clinical data and structural MRI."""

__version__ = "0.1.0"
