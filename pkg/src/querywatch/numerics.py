"""Small dense-network engine: layer chains, exact reverse-mode gradients, Adam.

Networks are plain sequences of :class:`LayerSpec` with parameters kept in an
ordered ``dict`` of float64 arrays. Only the handful of layers needed by the
classifier, the substitute models and the VAE are supported.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np

ModelParams = dict[str, np.ndarray]

LAYER_KINDS = ("affine", "relu", "sigmoid", "softmax", "dropout")


class ShapeError(ValueError):
    """Structural mismatch between specs, parameters and inputs."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Rng:
    """Seedable, splittable random source.

    Draws come from numpy's PCG64 seeded through ``SeedSequence(seed,
    spawn_key=stream)``, so the same ``(seed, stream)`` always replays the
    same sequence and child streams never overlap their parents.
    """

    seed: int
    stream: tuple[int, ...] = ()

    algorithm = "numpy-PCG64/SeedSequence"

    def child(self, *keys: Union[int, str]) -> "Rng":
        return Rng(self.seed, self.stream + tuple(_key(k) for k in keys))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.stream))
        )


def _key(k: Union[int, str]) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    if k < 0:
        raise ValueError("stream keys must be non-negative")
    return int(k)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int | None = None
    fan_out: int | None = None
    rate: float = 0.2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "affine" and not (
            self.fan_in and self.fan_out and self.fan_in > 0 and self.fan_out > 0
        ):
            raise ShapeError("affine layers need positive fan_in and fan_out")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ShapeError(f"dropout rate must lie in [0, 1), got {self.rate}")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "affine":
            out.update(fan_in=self.fan_in, fan_out=self.fan_out)
        if self.kind == "dropout":
            out["rate"] = self.rate
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def affine(fan_in: int, fan_out: int) -> LayerSpec:
    return LayerSpec("affine", fan_in, fan_out)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def dropout(rate: float = 0.2) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def mlp(
    sizes: Sequence[int],
    *,
    hidden: str = "relu",
    output: str | None = None,
    dropout_rate: float = 0.2,
) -> list[LayerSpec]:
    """Affine chain through ``sizes`` with ``hidden`` activations in between.

    Dropout follows every ReLU when ``dropout_rate > 0``.
    """
    specs: list[LayerSpec] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        specs.append(affine(a, b))
        if i < len(sizes) - 2:
            specs.append(LayerSpec(hidden))
            if hidden == "relu" and dropout_rate > 0:
                specs.append(dropout(dropout_rate))
    if output is not None:
        specs.append(LayerSpec(output))
    return specs


def check_chain(specs: Sequence[LayerSpec]) -> tuple[int | None, int | None]:
    """Validate fan chaining; returns (input width, output width)."""
    d_in = width = None
    for i, s in enumerate(specs):
        if s.kind == "affine":
            if width is not None and s.fan_in != width:
                raise ShapeError(
                    f"layer {i}: fan_in {s.fan_in} does not match incoming width {width}"
                )
            if d_in is None:
                d_in = s.fan_in
            width = s.fan_out
    return d_in, width


def param_names(i: int) -> tuple[str, str]:
    return f"L{i}.W", f"L{i}.b"


def init_params(specs: Sequence[LayerSpec], rng: Rng) -> ModelParams:
    """He init for affine layers feeding a ReLU, Glorot otherwise; zero biases."""
    check_chain(specs)
    params: ModelParams = {}
    for i, s in enumerate(specs):
        if s.kind != "affine":
            continue
        nxt = next((t.kind for t in specs[i + 1 :] if t.kind != "dropout"), None)
        if nxt == "relu":
            std = np.sqrt(2.0 / s.fan_in)
        else:
            std = np.sqrt(2.0 / (s.fan_in + s.fan_out))
        w_name, b_name = param_names(i)
        params[w_name] = rng.child(i).generator().normal(0.0, std, (s.fan_in, s.fan_out))
        params[b_name] = np.zeros(s.fan_out)
    return params


@dataclass
class Cache:
    """Activations of one forward pass (entry 0 is the input) and dropout masks."""

    acts: list[np.ndarray]
    masks: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected a vector or a batch matrix, got shape {x.shape}")
    return x


def forward_cache(
    params: ModelParams,
    specs: Sequence[LayerSpec],
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | Rng | None = None,
) -> Cache:
    x = _as_batch(x)
    d_in, _ = check_chain(specs)
    if d_in is not None and x.shape[1] != d_in:
        raise ShapeError(f"input width {x.shape[1]} does not match fan_in {d_in}")
    if isinstance(rng, Rng):
        rng = rng.generator()
    acts = [x]
    masks: dict[int, np.ndarray] = {}
    a = x
    for i, s in enumerate(specs):
        if s.kind == "affine":
            w_name, b_name = param_names(i)
            a = a @ params[w_name] + params[b_name]
        elif s.kind == "relu":
            a = np.maximum(a, 0.0)
        elif s.kind == "sigmoid":
            a = _sigmoid(a)
        elif s.kind == "softmax":
            a = _stable_softmax(a)
        elif s.kind == "dropout" and training and s.rate > 0:
            if rng is None:
                raise ShapeError("training-mode dropout needs an rng")
            mask = (rng.random(a.shape) >= s.rate) / (1.0 - s.rate)
            masks[i] = mask
            a = a * mask
        acts.append(a)
    return Cache(acts, masks)


def forward(
    params: ModelParams,
    specs: Sequence[LayerSpec],
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | Rng | None = None,
) -> list[np.ndarray]:
    return forward_cache(params, specs, x, training, rng).acts


def backward(
    params: ModelParams,
    specs: Sequence[LayerSpec],
    cache: Cache,
    grad_out: np.ndarray,
    stop: int | None = None,
) -> tuple[ModelParams, np.ndarray]:
    """Reverse pass from the gradient at ``cache.acts[stop]``.

    ``stop`` defaults to the network output; passing ``len(specs) - 1`` starts
    below a final softmax (used by the fused cross-entropy gradient).
    Returns parameter gradients and the gradient with respect to the input.
    """
    n = len(specs) if stop is None else stop
    g = np.asarray(grad_out, dtype=np.float64)
    grads: ModelParams = {}
    for i in range(n - 1, -1, -1):
        s = specs[i]
        a_in, a_out = cache.acts[i], cache.acts[i + 1]
        if s.kind == "affine":
            w_name, b_name = param_names(i)
            grads[w_name] = a_in.T @ g
            grads[b_name] = g.sum(axis=0)
            g = g @ params[w_name].T
        elif s.kind == "relu":
            g = g * (a_in > 0)
        elif s.kind == "sigmoid":
            g = g * a_out * (1.0 - a_out)
        elif s.kind == "softmax":
            g = a_out * (g - (g * a_out).sum(axis=1, keepdims=True))
        elif s.kind == "dropout" and i in cache.masks:
            g = g * cache.masks[i]
    return {k: grads[k] for k in params if k in grads}, g


@dataclass(frozen=True)
class CrossEntropy:
    """Mean cross-entropy against integer labels or probability rows."""

    targets: np.ndarray


@dataclass(frozen=True)
class SquaredError:
    """Mean over the batch of the summed squared error."""

    target: np.ndarray


# hook: output activations -> (loss value, gradient wrt output)
LossHook = Callable[[np.ndarray], tuple[float, np.ndarray]]
LossSpec = Union[CrossEntropy, SquaredError, LossHook]


def as_targets(targets: np.ndarray, k: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 1:
        if np.any((t < 0) | (t >= k)):
            raise ShapeError(f"label out of range for {k} classes")
        return np.eye(k)[t.astype(int)]
    if t.shape[1] != k:
        raise ShapeError(f"target width {t.shape[1]} does not match {k} classes")
    return t.astype(np.float64)


def backprop(
    params: ModelParams,
    specs: Sequence[LayerSpec],
    x: np.ndarray,
    loss: LossSpec,
    training: bool = False,
    rng: np.random.Generator | Rng | None = None,
) -> tuple[float, ModelParams, np.ndarray]:
    """Loss value, parameter gradients and input gradient for one batch."""
    cache = forward_cache(params, specs, x, training, rng)
    out = cache.output
    batch = out.shape[0]
    if isinstance(loss, CrossEntropy):
        if not specs or specs[-1].kind != "softmax":
            raise ShapeError("cross-entropy requires a final softmax layer")
        t = as_targets(loss.targets, out.shape[1])
        value = float(-(t * np.log(np.clip(out, 1e-300, None))).sum() / batch)
        # fused softmax + cross-entropy gradient at the logits
        g = (out * t.sum(axis=1, keepdims=True) - t) / batch
        grads, gx = backward(params, specs, cache, g, stop=len(specs) - 1)
        return value, grads, gx
    if isinstance(loss, SquaredError):
        diff = out - _as_batch(loss.target)
        value = float((diff**2).sum() / batch)
        grads, gx = backward(params, specs, cache, 2.0 * diff / batch)
        return value, grads, gx
    if callable(loss):
        value, g = loss(out)
        grads, gx = backward(params, specs, cache, g)
        return float(value), grads, gx
    raise ShapeError(f"unsupported loss specification {loss!r}")


@dataclass(frozen=True)
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: ModelParams, lr: float = 1e-3, **kw) -> AdamState:
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return AdamState(m=zeros, v={k: z.copy() for k, z in zeros.items()}, lr=lr, **kw)


def adam_step(
    state: AdamState, params: ModelParams, grads: ModelParams
) -> tuple[ModelParams, AdamState]:
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}; update rejected")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        step = (m[name] / c1) / (np.sqrt(v[name] / c2) + state.eps)
        new_params[name] = params[name] - state.lr * step
    return new_params, replace(state, m=m, v=v, t=t)


def add_grads(a: ModelParams, b: ModelParams) -> ModelParams:
    return {k: a[k] + b[k] if k in b else a[k] for k in a} | {
        k: v for k, v in b.items() if k not in a
    }
