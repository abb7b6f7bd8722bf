"""Evaluation: PSNR, embedding cosine similarity and Frechet distances over image-matrix sequences.

Frechet scores use per-frame embeddings from a pluggable embedder, so their
absolute values are not comparable with network-based FVD numbers; reports
label them "FD (default embedder)".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError, NumericError

PSNR_CAP = 100.0
COV_REGULARIZATION = 1e-6
PSD_TOLERANCE = 1e-9
SEQUENCE_MODES = ("per-view", "diagonal", "bidirectional-raster")

Embedder = Callable[[np.ndarray], np.ndarray]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


LUMA = np.array([0.299, 0.587, 0.114])
GRID = 8


def default_embedder(image: np.ndarray) -> np.ndarray:
    """Hand-crafted 72-D image descriptor.

    Layout: 8x8 block-mean luminance grid (64, row-major), per-channel means
    (3), per-channel variances (3), mean absolute horizontal and vertical
    luminance differences (2). Block edges are ``floor(i * size / 8)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or min(image.shape[:2]) < GRID:
        raise InvalidArgumentError(f"embedder needs an HxWx3 image at least {GRID}x{GRID}")
    h, w = image.shape[:2]
    luma = image @ LUMA
    ys = [i * h // GRID for i in range(GRID + 1)]
    xs = [j * w // GRID for j in range(GRID + 1)]
    grid = [luma[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean() for i in range(GRID) for j in range(GRID)]
    flat = image.reshape(-1, 3)
    grad_x = np.abs(np.diff(luma, axis=1)).mean() if w > 1 else 0.0
    grad_y = np.abs(np.diff(luma, axis=0)).mean() if h > 1 else 0.0
    return np.concatenate([grid, flat.mean(axis=0), flat.var(axis=0), [grad_x, grad_y]])


def cosine_similarity(a: np.ndarray, b: np.ndarray, embedder: Embedder = default_embedder) -> float:
    ea = np.asarray(embedder(a), dtype=np.float64)
    eb = np.asarray(embedder(b), dtype=np.float64)
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("zero-norm embedding")
    return float(np.clip(np.dot(ea, eb) / (na * nb), -1.0, 1.0))


def extract_sequences(matrix, mode: str) -> list[list[np.ndarray]]:
    """Frame sequences read from a views x times matrix.

    ``per-view``: one sequence per row in time order. ``diagonal``: cells
    ``(i, i)`` for ``i < min(V, T)``. ``bidirectional-raster``: rows top to
    bottom, alternating left-to-right and right-to-left.
    """
    return [[matrix.cells[v, t] for v, t in seq] for seq in sequence_indices(matrix.num_views,
                                                                            matrix.num_times, mode)]


def sequence_indices(num_views: int, num_times: int, mode: str) -> list[list[tuple[int, int]]]:
    if mode == "per-view":
        return [[(v, t) for t in range(num_times)] for v in range(num_views)]
    if mode == "diagonal":
        return [[(i, i) for i in range(min(num_views, num_times))]]
    if mode == "bidirectional-raster":
        seq = []
        for v in range(num_views):
            cols = range(num_times) if v % 2 == 0 else range(num_times - 1, -1, -1)
            seq.extend((v, t) for t in cols)
        return [seq]
    raise InvalidArgumentError(f"unknown sequence mode {mode!r}; choose from {', '.join(SEQUENCE_MODES)}")


@dataclass(frozen=True, eq=False)
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = mean.size
        if cov.shape != (d, d):
            raise InvalidArgumentError(f"covariance shape {cov.shape} does not match mean of size {d}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > PSD_TOLERANCE:
            raise NumericError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @classmethod
    def from_samples(cls, samples: np.ndarray, regularization: float = COV_REGULARIZATION) -> "GaussianFit":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 2:
            raise DegenerateInputError("need at least two samples to fit a Gaussian")
        cov = np.cov(samples, rowvar=False).reshape(samples.shape[1], samples.shape[1])
        return cls(samples.mean(axis=0), cov + regularization * np.eye(samples.shape[1]))


def _psd_eigh(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(m)
    worst = vals.min()
    if worst < -PSD_TOLERANCE:
        raise NumericError(f"{what} is not positive semidefinite (eigenvalue {worst:.3e})")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(p: GaussianFit, q: GaussianFit) -> float:
    """Squared Frechet distance between two Gaussians.

    The cross term ``tr((S1 S2)^(1/2))`` is evaluated as the trace of the
    square root of the symmetric matrix ``S1^(1/2) S2 S1^(1/2)``.
    """
    if p.mean.shape != q.mean.shape:
        raise InvalidArgumentError("fits have different dimensions")
    vals1, vecs1 = _psd_eigh(p.covariance, "first covariance")
    _psd_eigh(q.covariance, "second covariance")
    root1 = (vecs1 * np.sqrt(vals1)) @ vecs1.T
    middle = root1 @ q.covariance @ root1
    cross, _ = _psd_eigh(0.5 * (middle + middle.T), "cross product")
    diff = p.mean - q.mean
    value = diff @ diff + np.trace(p.covariance) + np.trace(q.covariance) - 2.0 * np.sqrt(cross).sum()
    return float(max(value, 0.0))


def _pool(matrix, mode: str, embedder: Embedder) -> np.ndarray:
    frames = [frame for seq in extract_sequences(matrix, mode) for frame in seq]
    if len(frames) < 2:
        raise DegenerateInputError(f"mode {mode!r} yields {len(frames)} frame(s); need at least 2")
    return np.stack([np.asarray(embedder(f), dtype=np.float64) for f in frames])


def fvd_score(generated, reference, mode: str, embedder: Embedder = default_embedder) -> float:
    """Frechet distance between embedding fits of two matrices' extracted frames."""
    if (generated.num_views, generated.num_times) != (reference.num_views, reference.num_times) \
            or generated.cells.shape != reference.cells.shape:
        raise InvalidArgumentError("matrices differ in views, times or image size")
    fit_gen = GaussianFit.from_samples(_pool(generated, mode, embedder))
    fit_ref = GaussianFit.from_samples(_pool(reference, mode, embedder))
    return frechet_distance(fit_gen, fit_ref)
