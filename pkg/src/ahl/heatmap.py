"""Gaussian target heatmaps and heatmap-to-coordinate decoding.

Targets are isotropic Gaussians with peak amplitude 1 at the landmark
(unnormalized), sampled at integer pixel centres; the target magnitude is
therefore independent of the width, and widening the Gaussian only widens
its support. Decoding is either a hard per-channel argmax or the
differentiable spatial-softmax expectation used by the coordinate
regression baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ConfigurationError, DimensionError

Array = np.ndarray

# A heatmap stack is a plain (N,H,W) array (or a Tensor of that shape);
# target stacks rendered here have every value in (0,1] and each channel's
# maximum at the grid point nearest its landmark.
HeatmapStack = Array

_coord_cache: dict[tuple[int, int], Array] = {}


@dataclass(frozen=True)
class LandmarkSet:
    """Named landmark coordinates in pixel units, (row, col) per landmark."""

    coords: Array
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise DimensionError(f"LandmarkSet: coords must be (N,2), got {coords.shape}")
        object.__setattr__(self, "coords", coords)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"L{i + 1}" for i in range(len(coords))))
        if len(self.names) != len(coords):
            raise DimensionError("LandmarkSet: names and coords lengths differ")

    def __len__(self) -> int:
        return len(self.coords)

    def validate_bounds(self, height: int, width: int, margin: float = 0.0) -> None:
        r, c = self.coords[:, 0], self.coords[:, 1]
        if ((r < margin) | (r > height - 1 - margin)
                | (c < margin) | (c > width - 1 - margin)).any():
            raise ConfigurationError(
                f"LandmarkSet: coordinates outside [{margin}, H-1-{margin}] bounds "
                f"for {height}x{width} image"
            )


def _grid(height: int, width: int) -> Array:
    """(H*W, 2) array of integer pixel-centre coordinates, row-major."""
    key = (height, width)
    got = _coord_cache.get(key)
    if got is None:
        rows, cols = np.mgrid[0:height, 0:width]
        got = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
        _coord_cache[key] = got
    return got


def gaussian_heatmap(center: tuple[float, float], sigma: float, height: int, width: int) -> Array:
    """Render one unnormalized Gaussian bump, peak 1 at ``center``."""
    if sigma <= 0.0:
        raise ConfigurationError(f"gaussian_heatmap: sigma must be positive, got {sigma}")
    row, col = float(center[0]), float(center[1])
    rr = np.arange(height, dtype=np.float64)[:, None]
    cc = np.arange(width, dtype=np.float64)[None, :]
    d2 = (rr - row) ** 2 + (cc - col) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def render_targets(landmarks: LandmarkSet, sigmas, height: int, width: int) -> HeatmapStack:
    """Stack one Gaussian channel per landmark."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.ndim != 1 or len(sigmas) != len(landmarks):
        raise DimensionError(
            f"render_targets: {len(landmarks)} landmarks vs sigmas {sigmas.shape}"
        )
    return render_targets_batch(landmarks.coords[None], sigmas, height, width)[0]


def render_targets_batch(coords: Array, sigmas, height: int, width: int) -> Array:
    """Vectorized target rendering for a (B,N,2) coordinate batch."""
    coords = np.asarray(coords, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[2] != 2:
        raise DimensionError(f"render_targets_batch: coords must be (B,N,2), got {coords.shape}")
    if sigmas.shape != (coords.shape[1],):
        raise DimensionError(f"render_targets_batch: sigmas {sigmas.shape} vs N={coords.shape[1]}")
    if (sigmas <= 0.0).any():
        raise ConfigurationError("render_targets_batch: sigmas must be positive")
    rr = np.arange(height, dtype=np.float64)
    cc = np.arange(width, dtype=np.float64)
    dr2 = (rr[None, None, :] - coords[:, :, 0:1]) ** 2        # (B,N,H)
    dc2 = (cc[None, None, :] - coords[:, :, 1:2]) ** 2        # (B,N,W)
    d2 = dr2[:, :, :, None] + dc2[:, :, None, :]              # (B,N,H,W)
    return np.exp(-d2 / (2.0 * sigmas * sigmas)[None, :, None, None])


def argmax_decode(stack) -> Array:
    """Hard decode: per channel, the (row, col) of the maximal pixel.

    Ties break to the smallest row, then smallest column. Accepts (N,H,W)
    or (B,N,H,W); returns int coordinates of shape (N,2) or (B,N,2).
    """
    data = stack.data if isinstance(stack, nk.Tensor) else np.asarray(stack)
    if data.ndim == 3:
        return argmax_decode(data[None])[0]
    if data.ndim != 4:
        raise DimensionError(f"argmax_decode: stack must be NHW or BNHW, got {data.shape}")
    if data.size == 0:
        raise DimensionError("argmax_decode: empty stack")
    b, n, h, w = data.shape
    flat_idx = data.reshape(b, n, h * w).argmax(axis=-1)
    return np.stack(np.unravel_index(flat_idx, (h, w)), axis=-1)


def soft_argmax_decode(channel):
    """Differentiable decode: spatial softmax, then expected coordinate.

    A Tensor input yields a gradient-carrying (2,) Tensor; a plain array
    yields a (row, col) float array. Output always lies inside the image.
    """
    if isinstance(channel, nk.Tensor):
        if channel.ndim != 2:
            raise DimensionError(f"soft_argmax_decode: channel must be HxW, got {channel.shape}")
        h, w = channel.shape
        flat = nk.reshape(channel, (1, h * w))
        probs = nk.softmax(flat, axis=-1)
        coords = nk.matmul_const(probs, _grid(h, w))
        return nk.reshape(coords, (2,))
    arr = np.asarray(channel, dtype=np.float64)
    with nk.no_grad():
        return soft_argmax_decode(nk.tensor(arr)).data


def soft_argmax_decode_batch(stack: nk.Tensor) -> nk.Tensor:
    """Batched soft-argmax over a (B,N,H,W) Tensor, returning (B*N, 2)."""
    if stack.ndim != 4:
        raise DimensionError(f"soft_argmax_decode_batch: need BNHW, got {stack.shape}")
    b, n, h, w = stack.shape
    flat = nk.reshape(stack, (b * n, h * w))
    probs = nk.softmax(flat, axis=-1)
    return nk.matmul_const(probs, _grid(h, w))
