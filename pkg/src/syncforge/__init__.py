"""Desk-scale audio-visual synchronization laboratory.

Submodules:

- dsp            mel spectrograms and the image-to-audio index map
- nn             numpy encoders with hand-written backward passes
- losses         contrastive / cross-entropy style sync losses
- data           synthetic paired-sequence corpora
- training       two-phase trainer (full fit, then BN-only retune)
- evaluation     shifted-clip offset sweeps and accuracy tables
- quality        sync-quality audit: offsets, active regions, verdicts
- figures        matplotlib renderings of the above as PNG files
- cli            ``syncforge`` command line entry point
"""

__version__ = "0.1.0"

from .errors import (
    SyncforgeError,
    InvalidInput,
    InvalidConfig,
    ShapeError,
    InvalidBatch,
    InvalidPhase,
    DegenerateDistance,
    TrainingDiverged,
)

__all__ = [
    "__version__",
    "SyncforgeError",
    "InvalidInput",
    "InvalidConfig",
    "ShapeError",
    "InvalidBatch",
    "InvalidPhase",
    "DegenerateDistance",
    "TrainingDiverged",
]
