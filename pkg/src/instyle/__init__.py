"""Desk-scale object insertion in style: a four-stream masked-attention
transformer trained with rectified flow under a staged protocol, plus
data curation and an evaluation harness on synthetic data."""

__version__ = "0.1.0"
