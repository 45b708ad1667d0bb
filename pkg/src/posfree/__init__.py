"""Workbench comparing QKV attention with trainable adjacency attention on
position-free masked value prediction."""

__version__ = "0.1.0"
