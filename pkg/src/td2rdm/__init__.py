"""Projective purification of two-particle RDMs inside a TD2RDM simulator."""

from .matcore import (
    OneRDM,
    SpinBlock2RDM,
    contract_2rdm,
    eigh,
    hs_inner,
    kernel_projector,
    negative_part,
)
from .purifier import (
    AffineConstraint,
    ConservedOperatorSet,
    MVector,
    PurificationConfig,
    PurificationReport,
    assemble_projector,
    build_conserved_set,
    defect,
    dq_couple,
    generic_purify,
    hole_from_particle,
    project_conserved,
    purify,
    purify_blocks,
)
from .hubbard import HubbardConfig, Observables
from .dynamics import PropagationConfig, PropagationState, TrajectoryRecord, propagate
from .reconstruct import ThreeRDM, cumulant_delta12, fix_contraction_d123, valdemoro_d123

__version__ = "0.1.0"

__all__ = [
    "AffineConstraint",
    "ConservedOperatorSet",
    "HubbardConfig",
    "MVector",
    "Observables",
    "OneRDM",
    "PropagationConfig",
    "PropagationState",
    "PurificationConfig",
    "PurificationReport",
    "SpinBlock2RDM",
    "ThreeRDM",
    "TrajectoryRecord",
    "assemble_projector",
    "build_conserved_set",
    "contract_2rdm",
    "cumulant_delta12",
    "defect",
    "dq_couple",
    "eigh",
    "fix_contraction_d123",
    "generic_purify",
    "hole_from_particle",
    "hs_inner",
    "kernel_projector",
    "negative_part",
    "project_conserved",
    "propagate",
    "purify",
    "purify_blocks",
    "valdemoro_d123",
]
