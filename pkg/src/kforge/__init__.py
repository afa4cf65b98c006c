"""kforge: dataset forge and evaluation harness for knowledge-injection fine-tuning."""

__version__ = "0.1.0"
