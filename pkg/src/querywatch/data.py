"""Datasets, class splits, the noise-mixed outlier set and benign query streams."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import Rng

PROVENANCE = ("PD", "AltPD", "Syn", "AdvPD", "NPD", "diluted", "perturbed")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    k: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"bad dataset shapes X{self.X.shape} y{self.y.shape}")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.X.size and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise ValueError("samples must lie in [0, 1]^d")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.k)

    def classes(self) -> list[int]:
        return sorted(set(self.y.tolist()))


@dataclass
class SplitBundle:
    train: Dataset
    test: Dataset
    held_out: Dataset
    class_map: dict[int, int]


@dataclass
class QueryStream:
    """Ordered queries with a provenance tag per query."""

    X: np.ndarray
    tags: list[str] = field(default_factory=list)
    seed: int | None = None
    # oracle answers recorded while an adaptive attacker generated the stream
    responses: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.X), -1)
        if len(self.tags) != len(self.X):
            raise ValueError("one provenance tag per query is required")
        if self.responses is not None and len(self.responses) != len(self.X):
            raise ValueError("one response per query is required")

    @classmethod
    def tagged(cls, X: np.ndarray, tag: str, seed: int | None = None) -> "QueryStream":
        return cls(X, [tag] * len(X), seed)

    @property
    def provenance(self) -> str:
        kinds = sorted(set(self.tags))
        return kinds[0] if len(kinds) == 1 else "mixed"

    def __len__(self) -> int:
        return len(self.X)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.X)

    def head(self, n: int) -> "QueryStream":
        r = None if self.responses is None else self.responses[:n]
        return QueryStream(self.X[:n], self.tags[:n], self.seed, r)


def _smooth_signals(n: int, d: int, g: np.random.Generator, n_freq: int = 4) -> np.ndarray:
    """Zero-mean low-frequency cosine mixtures with amplitude ~1."""
    j = np.arange(d) / d
    out = np.zeros((n, d))
    for f in range(1, n_freq + 1):
        amp = g.uniform(-1.0, 1.0, (n, 1)) / f
        phase = g.uniform(0.0, 2 * np.pi, (n, 1))
        out += amp * np.cos(2 * np.pi * f * j + phase)
    return out


def class_templates(k: int, d: int, g: np.random.Generator, class_sep: float) -> np.ndarray:
    """Shared smooth base plus one smooth deviation per class with RMS ``class_sep``."""
    base = 0.5 + 0.25 * _smooth_signals(1, d, g)
    dev = _smooth_signals(k, d, g)
    dev /= np.sqrt((dev**2).mean(axis=1, keepdims=True))
    return np.clip(base + class_sep * dev, 0.1, 0.9)


def gen_synthetic_dataset(
    d: int,
    k: int,
    n_per_class: int,
    spread: float,
    rng: Rng,
    class_sep: float = 0.005,
) -> Dataset:
    """Gaussian blobs around per-class templates, clamped to the unit cube.

    Every template is one shared smooth base signal plus a smooth class
    deviation of size ``class_sep``, so all classes (including any held out
    later) come from the same signal domain.
    """
    if d < 4 or k < 2:
        raise ValueError("need d >= 4 and k >= 2")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    templates = class_templates(k, d, rng.child("templates").generator(), class_sep)
    noise = rng.child("noise").generator().normal(0.0, 1.0, (k, n_per_class, d))
    X = np.clip(templates[:, None, :] + spread * noise, 0.0, 1.0).reshape(-1, d)
    y = np.repeat(np.arange(k), n_per_class)
    return Dataset(X, y, k)


def gen_npd_pool(
    d: int, n: int, rng: Rng, n_modes: int = 20, spread: float = 0.05
) -> Dataset:
    """Stand-in for non-problem-domain data: piecewise-constant signals.

    Labels record the generating mode and carry no task meaning.
    """
    g = rng.generator()
    templates = np.empty((n_modes, d))
    for i in range(n_modes):
        n_cuts = min(int(g.integers(3, 8)), d - 1)
        cuts = np.sort(g.choice(np.arange(1, d), size=n_cuts, replace=False))
        levels = g.uniform(0.0, 1.0, len(cuts) + 1)
        templates[i] = np.repeat(levels, np.diff(np.concatenate([[0], cuts, [d]])))
    y = g.integers(0, n_modes, n)
    X = np.clip(templates[y] + spread * g.normal(0.0, 1.0, (n, d)), 0.0, 1.0)
    return Dataset(X, y, n_modes)


def train_test_split(ds: Dataset, test_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Per-class stratified split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    g = rng.generator()
    train_idx, test_idx = [], []
    for c in ds.classes():
        idx = np.flatnonzero(ds.y == c)
        idx = idx[g.permutation(len(idx))]
        n_test = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


def split_holdout_classes(
    ds: Dataset, fraction: float, test_fraction: float = 0.2, rng: Rng | None = None
) -> SplitBundle:
    """Hold out the highest-indexed classes; retain the lowest ceil(k(1-fraction))."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n_keep = math.ceil(ds.k * (1.0 - fraction) - 1e-9)
    if n_keep < 2:
        raise ValueError(f"fraction {fraction} retains only {n_keep} class(es); need 2")
    keep = ds.y < n_keep
    class_map = {c: c for c in range(n_keep)}
    retained = Dataset(ds.X[keep], ds.y[keep], n_keep)
    held = Dataset(ds.X[~keep], ds.y[~keep], ds.k)
    train, test = train_test_split(retained, test_fraction, rng or Rng(0, (1,)))
    return SplitBundle(train, test, held, class_map)


def make_outlier_dataset(D_C: Dataset, rng: Rng, mix: float | None = None) -> Dataset:
    """Noise-mix every confidential sample with a random weight.

    For each x: nu ~ U(0,1), n ~ N(nu, 1)^d, emit clamp(nu*x + (1-nu)*n, 0, 1).
    ``mix`` pins nu for every sample (test hook).
    """
    if len(D_C) == 0:
        raise ValueError("confidential dataset is empty")
    g = rng.generator()
    n, d = D_C.X.shape
    nu = g.uniform(0.0, 1.0, (n, 1)) if mix is None else np.full((n, 1), float(mix))
    noise = nu + g.normal(0.0, 1.0, (n, d))
    X = np.clip(nu * D_C.X + (1.0 - nu) * noise, 0.0, 1.0)
    return Dataset(X, D_C.y.copy(), D_C.k)


def benign_stream(kind: str, source: Dataset, budget: int, rng: Rng) -> QueryStream:
    if kind not in ("PD", "AltPD"):
        raise ValueError(f"benign stream kind must be PD or AltPD, got {kind!r}")
    if len(source) == 0:
        raise ValueError("source dataset is empty")
    idx = rng.generator().integers(0, len(source), budget)
    return QueryStream.tagged(source.X[idx], kind, rng.seed)


# raw tensor directory: manifest.json + x.bin + y.bin (little endian)

_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


def save_raw_tensors(ds: Dataset, path: str | Path, dtype: str = "f32") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if dtype == "u8":
        xb = np.round(ds.X * 255.0).astype(_DTYPES["u8"])
    elif dtype == "f32":
        xb = ds.X.astype(_DTYPES["f32"])
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")
    (path / "x.bin").write_bytes(xb.tobytes())
    (path / "y.bin").write_bytes(ds.y.astype("<u2").tobytes())
    manifest = {
        "version": 1,
        "count": len(ds),
        "d": ds.d,
        "k": ds.k,
        "dtype": dtype,
        "label_dtype": "u16",
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_raw_tensors(manifest_path: str | Path) -> Dataset:
    """Load a raw tensor directory (or its manifest.json) into a Dataset."""
    p = Path(manifest_path)
    root = p.parent if p.name == "manifest.json" else p
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{root / 'manifest.json'}: manifest not found") from None
    if manifest.get("version") != 1:
        raise DatasetFormatError(f"unsupported manifest version {manifest.get('version')!r}")
    if manifest.get("label_dtype", "u16") != "u16":
        raise DatasetFormatError(f"unsupported label_dtype {manifest.get('label_dtype')!r}")
    try:
        count, d, k = int(manifest["count"]), int(manifest["d"]), int(manifest["k"])
        dt = _DTYPES[manifest["dtype"]]
    except KeyError as e:
        raise DatasetFormatError(f"manifest missing or invalid field {e}") from None

    xbytes = (root / "x.bin").read_bytes()
    ybytes = (root / "y.bin").read_bytes()
    want_x, want_y = count * d * dt.itemsize, count * 2
    if len(xbytes) != want_x:
        raise DatasetFormatError(f"x.bin: expected {want_x} bytes, found {len(xbytes)}")
    if len(ybytes) != want_y:
        raise DatasetFormatError(f"y.bin: expected {want_y} bytes, found {len(ybytes)}")

    X = np.frombuffer(xbytes, dtype=dt).reshape(count, d).astype(np.float64)
    if dt == _DTYPES["u8"]:
        X = X / 255.0
    else:
        bad = np.flatnonzero(~((X >= 0.0) & (X <= 1.0)).all(axis=1))
        if bad.size:
            off = int(bad[0]) * d * dt.itemsize
            raise DatasetFormatError(f"x.bin: sample {bad[0]} (byte offset {off}) outside [0, 1]")
    y = np.frombuffer(ybytes, dtype="<u2").astype(np.int64)
    bad = np.flatnonzero(y >= k)
    if bad.size:
        raise DatasetFormatError(
            f"y.bin: label {y[bad[0]]} at byte offset {int(bad[0]) * 2} out of range for k={k}"
        )
    return Dataset(X, y, k)


def concat(parts: Sequence[Dataset]) -> Dataset:
    k = max(p.k for p in parts)
    return Dataset(
        np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]), k
    )
