"""Shared test helpers."""

import numpy as np

from depthcast.tensor import Tensor, finite_diff_gradient


def fd_gradient(run, leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of ``run()`` (a scalar-Tensor thunk) w.r.t.
    ``leaf``, by temporarily substituting perturbed data into the leaf."""
    def f(t: Tensor) -> float:
        saved = leaf.data
        leaf.data = t.data
        try:
            return run().item()
        finally:
            leaf.data = saved
    return finite_diff_gradient(f, leaf, h)
