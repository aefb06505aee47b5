"""Multi-behavior recommendation with compressed interaction graphs and separate-input experts."""

from .cigcn import CigcnConfig, Representations, propagate
from .mbgraph import MultiplexGraph, SplitGraph, SynthConfig, leave_one_out_split, load_dataset, synth_generate
from .mesi import HeadConfig
from .sparse import SparseMatrix
from .train import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CigcnConfig",
    "HeadConfig",
    "MultiplexGraph",
    "Representations",
    "SparseMatrix",
    "SplitGraph",
    "SynthConfig",
    "TrainConfig",
    "fit",
    "leave_one_out_split",
    "load_dataset",
    "propagate",
    "synth_generate",
]
