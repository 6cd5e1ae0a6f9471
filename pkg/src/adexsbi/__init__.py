"""AdEx parameter inference from membrane traces on a virtual neuromorphic device."""

__version__ = "0.1.0"
