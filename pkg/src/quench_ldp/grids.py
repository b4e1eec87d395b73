"""Uniform torus grids and periodic multilinear interpolation."""
from __future__ import annotations

import numpy as np


def torus_axes(n_grid: int, dim: int) -> list[np.ndarray]:
    """Per-dimension node arrays i/n on the unit torus (no duplicated endpoint)."""
    return [np.arange(n_grid) / n_grid for _ in range(dim)]


def torus_points(n_grid: int, dim: int) -> np.ndarray:
    """All torus nodes as an (n_grid**dim, dim) array, C order."""
    mesh = np.meshgrid(*torus_axes(n_grid, dim), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


class PeriodicInterpolator:
    """Multilinear interpolation of node values on the unit torus.

    ``values`` has shape ``value_shape + (n,)*dim`` with the grid axes
    last.  Calls accept points of shape (..., dim) and return arrays of
    shape (...,) + value_shape.
    """

    def __init__(self, values: np.ndarray, dim: int):
        self.dim = dim
        self.n = values.shape[-1]
        if values.shape[-dim:] != (self.n,) * dim:
            raise ValueError("grid axes must be square and trailing")
        self.value_shape = values.shape[:-dim]
        # Move grid axes first for fancy indexing.
        self.values = np.moveaxis(
            values, tuple(range(-dim, 0)), tuple(range(dim))
        )

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        frac = (y % 1.0) * self.n
        i0 = np.floor(frac).astype(np.intp) % self.n
        w1 = frac - np.floor(frac)
        w0 = 1.0 - w1
        batch = y.shape[:-1]
        out = np.zeros(batch + self.value_shape)
        extra = (np.s_[...],) + (None,) * len(self.value_shape)
        for corner in range(1 << self.dim):
            idx = []
            weight = np.ones(batch)
            for d in range(self.dim):
                if corner >> d & 1:
                    idx.append((i0[..., d] + 1) % self.n)
                    weight = weight * w1[..., d]
                else:
                    idx.append(i0[..., d])
                    weight = weight * w0[..., d]
            out += weight[extra] * self.values[tuple(idx)]
        return out
