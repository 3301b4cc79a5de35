"""Speech separation for an unknown number of speakers."""

__version__ = "0.1.0"
