"""Multi-view colored-pointmap contrastive pretraining at desk scale."""

__version__ = "0.1.0"
