"""Modelling, calibration and reconstruction for multi-pixel photon counters."""

from .model import (
    DetectorParams,
    Povm,
    ProbDist,
    TransferMatrix,
    XtVariant,
    apply_forward,
    build_povm,
    dark_matrix,
    loss_matrix,
    total_matrix,
    xt_matrix,
)
from .sources import Coherent, Fock, TwoModeSqueezed, mean_to_r, parse_source, photon_distribution

__version__ = "0.1.0"
