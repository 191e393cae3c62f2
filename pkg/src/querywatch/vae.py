"""Two-target variational autoencoder used to embed queries.

Confidential samples are pulled towards N(mu_C, sigma_C^2) in latent space and
noise-mixed outlier samples towards N(mu_O, sigma_O^2); the mean head of the
encoder is the embedding used by the monitor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .numerics import (
    LayerSpec,
    ModelParams,
    Rng,
    ShapeError,
    adam_init,
    adam_step,
    affine,
    backward,
    check_chain,
    forward_cache,
    init_params,
    mlp,
    sigmoid,
)

log = logging.getLogger(__name__)

GROUPS = ("enc", "mu", "logvar", "dec")


@dataclass(frozen=True)
class LatentTargets:
    mu_C: np.ndarray
    mu_O: np.ndarray
    sigma_C: np.ndarray
    sigma_O: np.ndarray
    rho: float = 0.5

    @classmethod
    def default(cls, latent_dim: int = 32, offset: float = 5.0, rho: float = 0.5):
        ones = np.ones(latent_dim)
        return cls(np.zeros(latent_dim), offset * ones, ones, ones.copy(), rho)

    def __post_init__(self):
        if np.linalg.norm(self.mu_C - self.mu_O) <= 0:
            raise ValueError("mu_C and mu_O must differ")
        if np.any(self.sigma_C <= 0) or np.any(self.sigma_O <= 0):
            raise ValueError("target standard deviations must be positive")


@dataclass(frozen=True)
class VaeConfig:
    hidden: tuple[int, ...] = (256, 128)
    latent_dim: int = 32
    epochs: int = 500
    batch_size: int = 64
    lr: float = 3e-4
    tol: float = 1e-4
    window: int = 10
    recon_on_outliers: bool = True
    dropout: float = 0.2
    seed: int = 0


@dataclass
class VaeModel:
    specs: dict[str, list[LayerSpec]]
    params: dict[str, ModelParams]
    latent_dim: int
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def d(self) -> int:
        return check_chain(self.specs["enc"] or self.specs["mu"])[0]

    def encode(self, x, training=False, rng=None):
        """Return (mu, log-variance) for a batch."""
        h = forward_cache(self.params["enc"], self.specs["enc"], x, training, rng).output
        mu = forward_cache(self.params["mu"], self.specs["mu"], h).output
        lv = forward_cache(self.params["logvar"], self.specs["logvar"], h).output
        return mu, lv

    def sigma(self, x) -> np.ndarray:
        return np.exp(0.5 * self.encode(x)[1])

    def decode(self, z) -> np.ndarray:
        return forward_cache(self.params["dec"], self.specs["dec"], z).output


def build_vae(d: int, cfg: VaeConfig, rng: Rng) -> VaeModel:
    hid = list(cfg.hidden)
    L = cfg.latent_dim
    specs = {
        # trunk ends in ReLU (+dropout); heads are linear
        "enc": _trunk(d, hid, cfg.dropout),
        "mu": [affine(hid[-1], L)],
        "logvar": [affine(hid[-1], L)],
        "dec": mlp([L, *hid[::-1], d], dropout_rate=cfg.dropout) + [sigmoid()],
    }
    params = {g: init_params(specs[g], rng.child(g)) for g in GROUPS}
    return VaeModel(specs, params, L)


def _trunk(d: int, hidden: list[int], rate: float) -> list[LayerSpec]:
    specs = mlp([d, *hidden], dropout_rate=rate)
    specs.append(LayerSpec("relu"))
    if rate > 0:
        specs.append(LayerSpec("dropout", rate=rate))
    return specs


def kl_diag_gauss(mu1, sigma1, mu2, sigma2) -> np.ndarray:
    """KL(N(mu1, sigma1^2) || N(mu2, sigma2^2)) for diagonal Gaussians, summed
    over the last axis."""
    mu1, s1, mu2, s2 = (np.asarray(a, dtype=np.float64) for a in (mu1, sigma1, mu2, sigma2))
    if np.any(s1 <= 0) or np.any(s2 <= 0):
        raise ValueError("standard deviations must be positive")
    per_dim = np.log(s2 / s1) + (s1**2 + (mu1 - mu2) ** 2) / (2.0 * s2**2) - 0.5
    return per_dim.sum(axis=-1)


def _kl_from_logvar(mu, lv, mu_t, s_t):
    var_t = s_t**2
    kl = 0.5 * (np.log(var_t) - lv + (np.exp(lv) + (mu - mu_t) ** 2) / var_t - 1.0)
    return kl.sum(axis=1), (mu - mu_t) / var_t, 0.5 * (np.exp(lv) / var_t - 1.0)


def vae_loss_and_grads(
    model: VaeModel,
    batch_C: np.ndarray,
    batch_O: np.ndarray,
    targets: LatentTargets,
    rng: Rng | np.random.Generator | None = None,
    *,
    eps: np.ndarray | None = None,
    training: bool = False,
    recon_on_outliers: bool = True,
    with_grads: bool = True,
):
    """Loss terms and gradients of total = latent_C + latent_O + rho * recon.

    ``eps`` freezes the reparameterisation noise (rows: C batch then O batch).
    """
    batch_C = np.atleast_2d(np.asarray(batch_C, dtype=np.float64))
    batch_O = np.atleast_2d(np.asarray(batch_O, dtype=np.float64))
    nc, no = len(batch_C), len(batch_O)
    if nc == 0 or no == 0:
        raise ValueError("both batches must be non-empty")
    if isinstance(rng, Rng):
        rng = rng.generator()
    X = np.concatenate([batch_C, batch_O])
    n = nc + no
    L = model.latent_dim

    enc = forward_cache(model.params["enc"], model.specs["enc"], X, training, rng)
    h = enc.output
    mu_c = forward_cache(model.params["mu"], model.specs["mu"], h)
    lv_c = forward_cache(model.params["logvar"], model.specs["logvar"], h)
    mu, lv = mu_c.output, lv_c.output

    is_c = np.arange(n) < nc
    mu_t = np.where(is_c[:, None], targets.mu_C, targets.mu_O)
    s_t = np.where(is_c[:, None], targets.sigma_C, targets.sigma_O)
    kl, dkl_mu, dkl_lv = _kl_from_logvar(mu, lv, mu_t, s_t)
    latent_C, latent_O = kl[:nc].mean(), kl[nc:].mean()

    if eps is None:
        if rng is None:
            raise ValueError("an rng or frozen eps is required")
        eps = rng.normal(0.0, 1.0, (n, L))
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    rows = slice(None) if recon_on_outliers else slice(0, nc)
    nr = n if recon_on_outliers else nc
    dec = forward_cache(model.params["dec"], model.specs["dec"], z[rows], training, rng)
    diff = dec.output - X[rows]
    recon = (diff**2).sum() / nr
    total = latent_C + latent_O + targets.rho * recon
    losses = {
        "total": float(total),
        "latent_C": float(latent_C),
        "latent_O": float(latent_O),
        "recon": float(recon),
    }
    if not with_grads:
        return losses, None

    g_dec, g_z_rows = backward(model.params["dec"], model.specs["dec"], dec, targets.rho * 2 * diff / nr)
    g_z = np.zeros((n, L))
    g_z[rows] = g_z_rows
    scale = np.where(is_c, 1.0 / nc, 1.0 / no)[:, None]
    g_mu = g_z + dkl_mu * scale
    g_lv = g_z * 0.5 * std * eps + dkl_lv * scale
    g_muh, gh1 = backward(model.params["mu"], model.specs["mu"], mu_c, g_mu)
    g_lvh, gh2 = backward(model.params["logvar"], model.specs["logvar"], lv_c, g_lv)
    g_enc, _ = backward(model.params["enc"], model.specs["enc"], enc, gh1 + gh2)
    grads = {"enc": g_enc, "mu": g_muh, "logvar": g_lvh, "dec": g_dec}
    return losses, grads


def vae_loss(model, batch_C, batch_O, targets, rng=None, **kw) -> dict[str, float]:
    return vae_loss_and_grads(model, batch_C, batch_O, targets, rng, with_grads=False, **kw)[0]


def _flatten(tree: dict[str, ModelParams]) -> ModelParams:
    return {f"{g}/{k}": v for g, p in tree.items() for k, v in p.items()}


def _unflatten(flat: ModelParams) -> dict[str, ModelParams]:
    out: dict[str, ModelParams] = {g: {} for g in GROUPS}
    for key, v in flat.items():
        g, k = key.split("/", 1)
        out[g][k] = v
    return out


def train_vardetect_vae(
    D_C: Dataset,
    D_O: Dataset,
    targets: LatentTargets | None = None,
    cfg: VaeConfig = VaeConfig(),
    rng: Rng | None = None,
) -> VaeModel:
    """Adam on paired C/O batches until the epoch loss stops improving.

    Stops once the best epoch loss of the last ``cfg.window`` epochs improves
    on the best earlier loss by less than ``cfg.tol`` (relative), or after
    ``cfg.epochs`` epochs.
    """
    if len(D_C) == 0 or len(D_O) == 0:
        raise ValueError("both training sets must be non-empty")
    targets = targets or LatentTargets.default(cfg.latent_dim)
    rng = rng or Rng(cfg.seed, (0x7AE,))
    model = build_vae(D_C.d, cfg, rng.child("init"))
    flat = _flatten(model.params)
    state = adam_init(flat, lr=cfg.lr)
    order = rng.child("order").generator()
    noise = rng.child("noise").generator()
    nc, no = len(D_C), len(D_O)
    steps = math.ceil(max(nc, no) / cfg.batch_size)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        pc, po = order.permutation(nc), order.permutation(no)
        total = 0.0
        for s in range(steps):
            pos = np.arange(s * cfg.batch_size, (s + 1) * cfg.batch_size)
            bc = D_C.X[pc.take(pos, mode="wrap")]
            bo = D_O.X[po.take(pos, mode="wrap")]
            losses, grads = vae_loss_and_grads(
                model,
                bc,
                bo,
                targets,
                noise,
                training=True,
                recon_on_outliers=cfg.recon_on_outliers,
            )
            flat, state = adam_step(state, flat, _flatten(grads))
            model.params = _unflatten(flat)
            total += losses["total"]
        history.append(total / steps)
        if epoch >= cfg.window:
            before = min(history[: -cfg.window])
            recent = min(history[-cfg.window :])
            if (before - recent) / max(abs(before), 1e-12) < cfg.tol:
                log.info("vae converged after %d epochs", epoch + 1)
                break
    model.history = history
    return model


def encode_mu(model: VaeModel, x: np.ndarray) -> np.ndarray:
    """Deterministic mean embedding (no sampling, no dropout)."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x2.shape[1] != model.d:
        raise ShapeError(f"input width {x2.shape[1]} does not match encoder width {model.d}")
    mu = model.encode(x2)[0]
    return mu if np.ndim(x) == 2 else mu[0]


def latent_distance_and_grad(model: VaeModel, X: np.ndarray, center: np.ndarray):
    """Per-row ||f_mu(x) - center|| and its gradient with respect to x."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    enc = forward_cache(model.params["enc"], model.specs["enc"], X)
    mu_c = forward_cache(model.params["mu"], model.specs["mu"], enc.output)
    diff = mu_c.output - center
    dist = np.linalg.norm(diff, axis=1)
    g_mu = diff / np.maximum(dist, 1e-300)[:, None]
    _, gh = backward(model.params["mu"], model.specs["mu"], mu_c, g_mu)
    _, gx = backward(model.params["enc"], model.specs["enc"], enc, gh)
    return dist, gx


@dataclass(frozen=True)
class LatentReference:
    u: np.ndarray
    latent_dim: int

    def __len__(self) -> int:
        return len(self.u)


def build_reference(model: VaeModel, D_C_train: Dataset) -> LatentReference:
    u = np.array(encode_mu(model, D_C_train.X), copy=True)
    u.setflags(write=False)
    return LatentReference(u, model.latent_dim)
