"""Low-rank reaction-rate sensitivities and skeletal mechanism reduction."""

__version__ = "0.1.0"
