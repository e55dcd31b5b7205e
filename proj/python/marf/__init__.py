"""Medial atom ray fields: ray/atom geometry, training, rendering and evaluation."""

from ._marf import (
    Checkpoint,
    DegenerateNormalError,
    FormatError,
    IntersectionOutcome,
    InvalidInputError,
    MedialAtom,
    NumericalError,
    Shape,
    canonicalize,
    chamfer,
    classification,
    config,
    evaluate,
    evaluate_oracle,
    gradcheck,
    intersect_atom,
    make_dataset,
    render,
    render_modes,
    set_threads,
    threads,
    train,
)

__all__ = [
    "Checkpoint",
    "DegenerateNormalError",
    "FormatError",
    "IntersectionOutcome",
    "InvalidInputError",
    "MedialAtom",
    "NumericalError",
    "Shape",
    "canonicalize",
    "chamfer",
    "classification",
    "config",
    "evaluate",
    "evaluate_oracle",
    "gradcheck",
    "intersect_atom",
    "make_dataset",
    "render",
    "render_modes",
    "set_threads",
    "threads",
    "train",
]
