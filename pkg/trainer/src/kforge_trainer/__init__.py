"""kforge-trainer: toy-scale adapter fine-tuning over kforge datasets."""

__version__ = "0.1.0"
