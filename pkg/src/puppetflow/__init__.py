"""Desk-scale conditional video diffusion for character animation and replacement.

The stack, bottom up: a numpy-backed tensor core with reverse-mode
differentiation, a toy causal video autoencoder, condition-pack construction
for the two generation modes, skeleton and face conditioning pipelines, a
small diffusion transformer with low-rank relighting adapters, a five-stage
training curriculum over procedurally generated puppet clips, and a
segment-based long-video inference orchestrator.
"""

__version__ = "0.1.0"
