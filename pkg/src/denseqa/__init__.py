"""Dense passage retrieval pretraining and open-domain QA finetuning engine."""

__version__ = "0.1.0"
