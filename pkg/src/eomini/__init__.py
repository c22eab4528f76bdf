"""Desk-scale unified vision-text-action model.

One shared decoder-only transformer emits text autoregressively and denoises
continuous action chunks by rectified flow, trained on interleaved sequences
from a deterministic tabletop world with an exhaustively checkable data
pipeline and closed-loop evaluation.
"""

__version__ = "0.1.0"

from . import actionflow, backbone, datapipe, evalsuite, numerics, sequence, synthworld, trainer  # noqa: F401
from .vocab import VOCAB, Delimiter  # noqa: F401
