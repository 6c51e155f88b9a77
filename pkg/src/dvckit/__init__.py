"""Digital volume correlation with gray-residual self-correction.

Modules: ``volume`` (I/O, sampling, segmentation), ``correlate`` (integer
search and IC-GN refinement), ``field`` (node fields, densification,
composition, strain), ``correct`` (warp and re-correlate loop),
``residual`` (background noise, accuracy index, binned curves), ``synth``
(speckle volumes and analytic deformations) and ``cli``.
"""

from .correct import CorrectionReport, self_correct, warp_volume
from .correlate import DvcParams, run_dvc
from .field import (
    DisplacementField,
    GridSpec,
    Status,
    StrainField,
    accumulate,
    compose,
    densify,
    equivalent_strain,
    strain_from_field,
)
from .residual import AccuracyReport, accuracy_index, residual_report
from .volume import GrayInterval, LabelVolume, Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "AccuracyReport",
    "CorrectionReport",
    "DisplacementField",
    "DvcParams",
    "GrayInterval",
    "GridSpec",
    "LabelVolume",
    "Status",
    "StrainField",
    "Volume",
    "accumulate",
    "accuracy_index",
    "compose",
    "densify",
    "equivalent_strain",
    "load_volume",
    "residual_report",
    "run_dvc",
    "save_volume",
    "self_correct",
    "strain_from_field",
    "warp_volume",
]
