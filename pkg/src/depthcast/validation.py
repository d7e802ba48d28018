"""Input validation helpers for the estimator facade."""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics
from .model import SparseDepthFrame


def as_frame(obj) -> SparseDepthFrame:
    """Coerce a frame-like object: a SparseDepthFrame, a (depth, mask) pair,
    or a bare depth array (mask inferred from depth > 0)."""
    if isinstance(obj, SparseDepthFrame):
        return obj
    if isinstance(obj, tuple) and len(obj) == 2:
        return SparseDepthFrame(np.asarray(obj[0]), np.asarray(obj[1]))
    arr = np.asarray(obj, dtype=np.float64)
    return SparseDepthFrame(arr, (arr > 0).astype(np.float64))


def as_sequence(obj, seq_id: str = "seq"):
    """Coerce a sequence-like object into a Sequence."""
    from .data import Sequence  # estimator-level import keeps module DAG acyclic
    if isinstance(obj, Sequence):
        return obj
    frames = [as_frame(f) for f in obj]
    h, w = frames[0].shape
    intr = CameraIntrinsics(fx=float(w), fy=float(w), cx=w / 2.0, cy=h / 2.0)
    return Sequence(frames, intr, seq_id)


def check_sequences(X, min_len: int = 2) -> list:
    """Validate a dataset: a non-empty list of sequences of uniform resolution,
    each at least ``min_len`` frames."""
    if X is None or len(X) == 0:
        raise ValueError("expected a non-empty list of sequences")
    seqs = [as_sequence(x, seq_id=f"seq-{i:04d}") for i, x in enumerate(X)]
    shape = seqs[0].shape
    for s in seqs:
        if s.shape != shape:
            raise ValueError(f"sequence {s.id} resolution {s.shape} != {shape}")
        if len(s) < min_len:
            raise ValueError(f"sequence {s.id} has {len(s)} frames, "
                             f"need >= {min_len}")
    return seqs
