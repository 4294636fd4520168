"""In-context tuning of a frozen multimodal sequence-to-sequence model.

A small trainable prefix module encodes N labeled [image, instruction,
target] examples into embeddings that are prepended to a frozen
encoder-decoder backbone's input. Synthetic shape scenes with exact
oracles stand in for web-scale data.
"""
__version__ = "0.1.0"
