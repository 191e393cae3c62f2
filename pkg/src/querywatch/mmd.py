"""Maximum Mean Discrepancy with a Gaussian-kernel width ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WIDTHS = (1.0, 5.0, 10.0, 15.0, 20.0)


@dataclass(frozen=True)
class MmdConfig:
    widths: tuple[float, ...] = WIDTHS
    M: int = 100
    N: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.widths or min(self.widths) <= 0:
            raise ValueError("kernel widths must be positive")
        if self.M < 1 or self.N < 2:
            raise ValueError("need M >= 1 and N >= 2")


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = (a * a).sum(axis=-1)[..., :, None]
    nb = (b * b).sum(axis=-1)[..., None, :]
    sq = na + nb - 2.0 * (a @ np.swapaxes(b, -1, -2))
    return np.maximum(sq, 0.0)


def _gram(sq: np.ndarray, widths) -> np.ndarray:
    return sum(np.exp(-sq / (2.0 * w * w)) for w in widths)


def kernel(z, z2, widths=WIDTHS) -> float:
    z, z2 = np.asarray(z, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    if z.shape != z2.shape:
        raise ValueError(f"dimension mismatch {z.shape} vs {z2.shape}")
    sq = float(((z - z2) ** 2).sum())
    return float(sum(np.exp(-sq / (2.0 * w * w)) for w in widths))


def _mmd_from_sets(A: np.ndarray, B: np.ndarray, widths) -> np.ndarray:
    """Biased V-statistic MMD, vectorised over leading batch axes."""
    kaa = _gram(_sq_dists(A, A), widths).mean(axis=(-2, -1))
    kbb = _gram(_sq_dists(B, B), widths).mean(axis=(-2, -1))
    kab = _gram(_sq_dists(A, B), widths).mean(axis=(-2, -1))
    return np.sqrt(np.maximum(kaa + kbb - 2.0 * kab, 0.0))


def mmd_exact(A, B, widths=WIDTHS) -> float:
    """Norm of the difference of mean kernel embeddings (diagonal terms kept)."""
    A, B = np.atleast_2d(np.asarray(A, float)), np.atleast_2d(np.asarray(B, float))
    if len(A) == 0 or len(B) == 0:
        raise ValueError("both sets must be non-empty")
    if A.shape[1] != B.shape[1]:
        raise ValueError("sets have different dimensions")
    # canonical argument order keeps the cross-term summation order, and hence
    # the result, bitwise symmetric
    if (len(A), A.tobytes()) > (len(B), B.tobytes()):
        A, B = B, A
    return float(_mmd_from_sets(A, B, widths))


def subsample_indices(n_a: int, n_b: int, cfg: MmdConfig, key: tuple[int, ...] = ()):
    """Index arrays (M, N) for both sets; subsample i uses its own rng stream."""
    ia = np.empty((cfg.M, cfg.N), dtype=np.int64)
    ib = np.empty((cfg.M, cfg.N), dtype=np.int64)
    for i in range(cfg.M):
        ss = np.random.SeedSequence(cfg.seed, spawn_key=(*key, i))
        g = np.random.Generator(np.random.PCG64(ss))
        ia[i] = g.choice(n_a, cfg.N, replace=False)
        ib[i] = g.choice(n_b, cfg.N, replace=False)
    return ia, ib


def mmd_subsampled(A, B, cfg: MmdConfig = MmdConfig(), key: tuple[int, ...] = ()) -> float:
    """Mean of ``cfg.M`` exact MMDs between random size-``cfg.N`` subsamples.

    ``key`` namespaces the rng streams (the monitor passes the query index).
    """
    A, B = np.asarray(A, float), np.asarray(B, float)
    if len(A) < cfg.N or len(B) < cfg.N:
        raise ValueError(f"both sets need at least N={cfg.N} points")
    ia, ib = subsample_indices(len(A), len(B), cfg, key)
    return float(_mmd_from_sets(A[ia], B[ib], cfg.widths).mean())
