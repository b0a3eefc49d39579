"""Multimodal (SAR + optical) contrastive pre-training and segmentation transfer at desk scale."""

__version__ = "0.1.0"
