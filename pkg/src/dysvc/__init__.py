"""Two-stage normal-to-dysarthric voice conversion and evaluation toolkit."""

__version__ = "0.1.0"
