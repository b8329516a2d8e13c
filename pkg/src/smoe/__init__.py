"""Desk-scale lab for sink-aware attention.

Numpy-backed autograd, three attention variants (vanilla, sink, gated),
gate/balance diagnostics, and a tiny byte-level LM trainer with bit-exact
checkpointing. See README for the command-line entry points.
"""

__version__ = "0.1.0"
