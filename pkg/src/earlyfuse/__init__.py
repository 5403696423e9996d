"""Early-fusion multimodal contrastive embedding at desk scale."""

__version__ = "0.1.0"
