"""Attacker and adaptive-attacker query generators.

Extraction attacks that adapt to the oracle's answers (JbDA, the FGSM family,
active-learning NPD) are generated against an undefended oracle and return
the recorded responses alongside the queries. Replaying such a stream through
a blocking monitor yields exactly the transcript the attacker would have seen
online: every query before the block was answered the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, QueryStream
from .models import (
    Classifier,
    QueryTranscript,
    TrainConfig,
    classifier_specs,
    fit,
    input_gradient,
    jacobian,
    output_gradient,
    substitute_config,
    train_substitute,
)
from .numerics import Rng
from .vae import LatentTargets, VaeModel, latent_distance_and_grad

ATTACK_KINDS = (
    "syn_uniform",
    "jbda",
    "fgsm_n",
    "fgsm_n_iter",
    "fgsm_t_rnd",
    "fgsm_t_rnd_iter",
    "npd",
)
FGSM_KINDS = ATTACK_KINDS[2:6]
NPD_STRATEGIES = ("random", "uncertainty", "dfal", "kcenter", "dfal_kcenter")
EVASION_EPS = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    budget: int = 5000
    seed: int = 0
    eps: float = 0.1
    iters: int = 5
    lam: float = 0.1
    rounds: int = 6
    seed_sample_count: int = 100
    npd_strategy: str = "dfal_kcenter"
    npd_rounds: int = 10

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.kind in FGSM_KINDS and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.kind in ("jbda", *FGSM_KINDS) and self.seed_sample_count > self.budget:
            raise ValueError("seed_sample_count exceeds budget")
        if self.npd_strategy not in NPD_STRATEGIES:
            raise ValueError(f"unknown NPD strategy {self.npd_strategy!r}")


def syn_uniform_stream(d: int, budget: int, rng: Rng) -> QueryStream:
    return QueryStream.tagged(rng.generator().uniform(0.0, 1.0, (budget, d)), "Syn", rng.seed)


def _augmentation_stream(oracle, seeds, step, rounds, budget, rng, sub_cfg, tag):
    pool = np.asarray(seeds.X if isinstance(seeds, Dataset) else seeds, dtype=np.float64)
    if len(pool) == 0:
        raise ValueError("need at least one seed sample")
    responses = oracle.predict_proba(pool)
    specs = classifier_specs(pool.shape[1], oracle.k, sub_cfg.hidden, sub_cfg.dropout)
    r = 0
    while len(pool) < budget and (rounds is None or r < rounds):
        cfg = TrainConfig(**{**sub_cfg.__dict__, "seed": sub_cfg.seed + r})
        sub = fit(specs, pool, responses, cfg)
        new = step(sub, pool, responses, rng.child(r))
        pool = np.concatenate([pool, new])
        responses = np.concatenate([responses, oracle.predict_proba(new)])
        r += 1
    n = min(budget, len(pool))
    return QueryStream(pool[:n], [tag] * n, rng.seed, responses[:n])


def jbda_step(sub: Classifier, X, responses, lam: float) -> np.ndarray:
    """x' = clamp(x + lam * sign(grad_x S_y(x)), 0, 1) with y the oracle label."""
    y = responses.argmax(axis=1)
    return np.clip(X + lam * np.sign(output_gradient(sub, X, y)), 0.0, 1.0)


def jbda_stream(
    oracle: Classifier,
    seeds,
    lam: float = 0.1,
    rounds: int = 6,
    budget: int = 5000,
    rng: Rng = Rng(0),
    sub_cfg: TrainConfig | None = None,
) -> QueryStream:
    """Jacobian-based dataset augmentation; the pool doubles every round."""
    sub_cfg = sub_cfg or substitute_config("jbda")
    step = lambda sub, X, R, _rng: jbda_step(sub, X, R, lam)
    return _augmentation_stream(oracle, seeds, step, rounds, budget, rng, sub_cfg, "AdvPD")


def fgsm_perturb(
    sub: Classifier, X: np.ndarray, kind: str, eps: float, iters: int, rng: Rng
) -> np.ndarray:
    """Signed-gradient steps on the substitute loss, clamped after each step.

    Non-targeted kinds ascend L(y, S(x)) for the substitute's label y; targeted
    kinds descend L(y_r, S(x)) for y_r uniform over every class.
    """
    if kind not in FGSM_KINDS:
        raise ValueError(f"unknown FGSM kind {kind!r}")
    if not kind.endswith("_iter"):
        iters = 1
    if iters < 1:
        raise ValueError("iters must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if kind.startswith("fgsm_t_rnd"):
        y, sign = rng.generator().integers(0, sub.k, len(X)), -1.0
    else:
        y, sign = sub.predict(X), 1.0
    out = X.copy()
    for _ in range(iters):
        out = np.clip(out + sign * eps * np.sign(input_gradient(sub, out, y)), 0.0, 1.0)
    return out


def fgsm_stream(
    kind: str,
    oracle: Classifier,
    seeds,
    eps: float = 0.1,
    iters: int = 5,
    budget: int = 5000,
    rng: Rng = Rng(0),
    sub_cfg: TrainConfig | None = None,
    rounds: int | None = None,
) -> QueryStream:
    """FGSM-family augmentation, folded into the substitute round by round."""
    sub_cfg = sub_cfg or substitute_config(kind)
    step = lambda sub, X, R, r: fgsm_perturb(sub, X, kind, eps, iters, r)
    return _augmentation_stream(oracle, seeds, step, rounds, budget, rng, sub_cfg, "AdvPD")


@dataclass
class DeepFoolResult:
    x_adv: np.ndarray
    alpha: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray


# minimal extra push past the linearised boundary
_DEEPFOOL_PUSH = 1e-8


def deepfool(
    sub: Classifier, X: np.ndarray, max_iters: int = 50, overshoot: float = 0.02
) -> DeepFoolResult:
    """Multi-class DeepFool on the substitute's logits, vectorised over rows."""
    X0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = len(X0)
    label = sub.logits(X0).argmax(axis=1)
    r_tot = np.zeros_like(X0)
    iters = np.zeros(n, dtype=np.int64)
    x_adv = X0.copy()
    for _ in range(max_iters):
        logits = sub.logits(x_adv)
        active = np.flatnonzero(logits.argmax(axis=1) == label)
        if active.size == 0:
            break
        J = jacobian(sub, x_adv[active])  # (a, k, d)
        la = label[active]
        rows = np.arange(active.size)
        w = J - J[rows, la][:, None, :]
        f = logits[active] - logits[active, la][:, None]
        norms = np.linalg.norm(w, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            pert = np.abs(f) / norms
        pert[rows, la] = np.inf
        pert[~np.isfinite(pert)] = np.inf
        best = pert.argmin(axis=1)
        p = pert[rows, best]
        ok = np.isfinite(p)
        wb = w[rows, best]
        step = np.zeros_like(wb)
        step[ok] = ((p[ok] + _DEEPFOOL_PUSH) / norms[rows, best][ok])[:, None] * wb[ok]
        r_tot[active] += step
        iters[active] += 1
        x_adv = X0 + (1.0 + overshoot) * r_tot
    converged = sub.logits(x_adv).argmax(axis=1) != label
    alpha = np.linalg.norm(x_adv - X0, axis=1)
    return DeepFoolResult(x_adv, alpha, converged, iters)


def deepfool_alpha(sub: Classifier, x: np.ndarray, max_iters: int = 50, overshoot: float = 0.02):
    """Single-sample DeepFool: (x_adv, alpha, converged)."""
    res = deepfool(sub, np.asarray(x)[None, :], max_iters, overshoot)
    return res.x_adv[0], float(res.alpha[0]), bool(res.converged[0])


def kcenter_greedy(
    candidates: np.ndarray, centers: np.ndarray, n: int, rng: Rng | None = None
) -> list[int]:
    """Greedy farthest-point selection of ``n`` candidate indices.

    With no centers the first pick is uniform at random (``rng`` required).
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    if n > len(candidates):
        raise ValueError("cannot select more points than candidates")
    if len(centers):
        d = np.sqrt(((candidates[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1))
        min_d = d.min(axis=1)
    else:
        min_d = None
    picks: list[int] = []
    for _ in range(n):
        if min_d is None:
            if rng is None:
                raise ValueError("an rng is needed when there are no centers")
            i = int(rng.generator().integers(len(candidates)))
            min_d = np.full(len(candidates), np.inf)
        else:
            i = int(np.argmax(min_d))
        picks.append(i)
        new = np.sqrt(((candidates - candidates[i]) ** 2).sum(axis=1))
        min_d = np.minimum(min_d, new)
        min_d[picks] = -np.inf
    return picks


def entropy(P: np.ndarray, sum_log: bool = False) -> np.ndarray:
    """Row-wise Shannon entropy; ``sum_log`` returns the unweighted sum of log p."""
    P = np.clip(P, 1e-300, 1.0)
    if sum_log:
        return np.log(P).sum(axis=1)
    return -(P * np.log(P)).sum(axis=1)


def npd_select(
    pool: Dataset | np.ndarray,
    strategy: str,
    substitute: Classifier | None,
    already_selected,
    n: int,
    rng: Rng,
    *,
    sum_log_entropy: bool = False,
    dfal_factor: int = 5,
    max_iters: int = 50,
    overshoot: float = 0.02,
) -> np.ndarray:
    """Pick ``n`` not-yet-selected pool indices with an active-learning strategy."""
    X = pool.X if isinstance(pool, Dataset) else np.asarray(pool, dtype=np.float64)
    chosen = np.zeros(len(X), dtype=bool)
    chosen[list(already_selected)] = True
    avail = np.flatnonzero(~chosen)
    if n > len(avail):
        raise ValueError(f"asked for {n} samples but only {len(avail)} remain")
    if strategy == "random":
        return np.sort(rng.generator().choice(avail, n, replace=False))
    if substitute is None:
        raise ValueError(f"strategy {strategy!r} needs a substitute model")
    if strategy == "uncertainty":
        h = entropy(substitute.predict_proba(X[avail]), sum_log_entropy)
        return avail[np.argsort(-h, kind="stable")[:n]]
    if strategy == "dfal":
        alpha = deepfool(substitute, X[avail], max_iters, overshoot).alpha
        return avail[np.argsort(alpha, kind="stable")[:n]]
    if strategy in ("kcenter", "dfal_kcenter"):
        cand = avail
        if strategy == "dfal_kcenter":
            alpha = deepfool(substitute, X[avail], max_iters, overshoot).alpha
            cand = avail[np.argsort(alpha, kind="stable")[: min(len(avail), dfal_factor * n)]]
        feats = substitute.predict_proba(X[cand])
        centers = substitute.predict_proba(X[chosen]) if chosen.any() else np.empty((0, feats.shape[1]))
        return cand[kcenter_greedy(feats, centers, n, rng)]
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class NpdResult:
    transcript: QueryTranscript
    substitute: Classifier
    stream: QueryStream
    order: np.ndarray = field(repr=False)


def npd_attack(
    oracle: Classifier,
    pool: Dataset,
    strategy: str = "dfal_kcenter",
    budget: int = 5000,
    rounds: int = 10,
    cfg: TrainConfig | None = None,
    rng: Rng = Rng(0),
    **select_kw,
) -> NpdResult:
    """Active-learning extraction from a non-problem-domain pool.

    Round 0 queries a random batch; every later round retrains the substitute
    on the transcript so far and selects its batch with ``strategy``.
    """
    if budget > len(pool):
        raise ValueError(f"pool of {len(pool)} cannot cover a budget of {budget}")
    cfg = cfg or substitute_config("npd")
    sizes = [budget // rounds] * rounds
    sizes[-1] += budget - sum(sizes)
    order: list[int] = []
    sub = None
    for r, size in enumerate(sizes):
        if size == 0:
            continue
        strat = "random" if r == 0 else strategy
        if r > 0:
            rcfg = TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + r})
            t = QueryTranscript(pool.X[order], oracle.predict_proba(pool.X[order]))
            sub = train_substitute(t, "npd", rcfg)
        idx = npd_select(pool, strat, sub, order, size, rng.child(r), **select_kw)
        order.extend(int(i) for i in idx)
    order_arr = np.asarray(order, dtype=np.int64)
    X = pool.X[order_arr]
    R = oracle.predict_proba(X)
    transcript = QueryTranscript(X, R)
    final = train_substitute(transcript, "npd", cfg)
    stream = QueryStream(X, ["NPD"] * len(X), rng.seed, R)
    return NpdResult(transcript, final, stream, order_arr)


@dataclass(frozen=True)
class DilutionSchedule:
    dilution: float
    benign_source: QueryStream
    period: int = 100

    def __post_init__(self):
        if not 0 < self.dilution <= 100:
            raise ValueError("dilution must lie in (0, 100]")

    @property
    def attack_per_period(self) -> int:
        return int(round(self.dilution * self.period / 100.0))


def spaced_out_stream(attack: QueryStream, schedule: DilutionSchedule) -> QueryStream:
    """Per period: ``p`` attack queries, then ``period - p`` benign ones."""
    p, period = schedule.attack_per_period, schedule.period
    benign = schedule.benign_source
    rows, tags, resp = [], [], []
    with_resp = attack.responses is not None and benign.responses is not None
    ia = ib = 0
    while True:
        if ia + p > len(attack):
            break
        need_b = period - p
        if need_b and ib + need_b > len(benign):
            break
        for src, start, cnt in ((attack, ia, p), (benign, ib, need_b)):
            rows.append(src.X[start : start + cnt])
            tags.extend(src.tags[start : start + cnt])
            if with_resp:
                resp.append(src.responses[start : start + cnt])
        ia, ib = ia + p, ib + need_b
    d = attack.X.shape[1]
    X = np.concatenate(rows) if rows else np.empty((0, d))
    R = np.concatenate(resp) if with_resp and resp else None
    return QueryStream(X, tags, attack.seed, R)


def evasion_perturb(
    model: VaeModel,
    targets: LatentTargets,
    x: np.ndarray,
    eps: float,
    iters: int,
    ascend: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """White-box signed-gradient walk of f_mu(x) towards mu_C.

    Descends ||f_mu(x) - mu_C|| by default; ``ascend=True`` applies the update
    with a plus sign instead. Returns the perturbed inputs and the latent
    distance at every iteration (row 0 is the start), one column per sample.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    sign = 1.0 if ascend else -1.0
    trace = np.empty((iters + 1, len(X)))
    for t in range(iters):
        dist, g = latent_distance_and_grad(model, X, targets.mu_C)
        trace[t] = dist
        X = np.clip(X + sign * eps * np.sign(g), 0.0, 1.0)
    trace[iters] = latent_distance_and_grad(model, X, targets.mu_C)[0]
    out = X if np.ndim(x) == 2 else X[0]
    return out, trace if np.ndim(x) == 2 else trace[:, 0]


@dataclass
class EvasionRecord:
    epsilon: float
    trace: np.ndarray  # mean latent distance per iteration
    x_final: np.ndarray


def evasion_grid(
    model: VaeModel,
    targets: LatentTargets,
    X: np.ndarray,
    eps_grid=EVASION_EPS,
    iters: int = 5000,
    ascend: bool = False,
) -> list[EvasionRecord]:
    records = []
    for eps in eps_grid:
        xf, tr = evasion_perturb(model, targets, X, eps, iters, ascend)
        records.append(EvasionRecord(float(eps), tr.reshape(iters + 1, -1).mean(axis=1), xf))
    return records


def evasion_to_csv(records: list[EvasionRecord]) -> str:
    lines = ["epsilon,iteration,latent_distance"]
    for r in records:
        lines.extend(f"{float(r.epsilon)!r},{i},{float(v)!r}" for i, v in enumerate(r.trace))
    return "\n".join(lines) + "\n"


def run_attack(
    cfg: AttackConfig,
    oracle: Classifier,
    seeds: Dataset | None = None,
    pool: Dataset | None = None,
    sub_cfg: TrainConfig | None = None,
) -> QueryStream:
    """Generate the recorded query stream for one attack configuration."""
    rng = Rng(cfg.seed, (0xA7,))
    if cfg.kind == "syn_uniform":
        s = syn_uniform_stream(oracle.d, cfg.budget, rng)
        return QueryStream(s.X, s.tags, cfg.seed, oracle.predict_proba(s.X))
    if cfg.kind == "npd":
        if pool is None:
            raise ValueError("an NPD attack needs a pool")
        return npd_attack(
            oracle, pool, cfg.npd_strategy, cfg.budget, cfg.npd_rounds, sub_cfg, rng
        ).stream
    if seeds is None:
        raise ValueError(f"{cfg.kind} needs seed samples")
    seed_X = seeds.X[: cfg.seed_sample_count]
    if cfg.kind == "jbda":
        return jbda_stream(oracle, seed_X, cfg.lam, cfg.rounds, cfg.budget, rng, sub_cfg)
    return fgsm_stream(cfg.kind, oracle, seed_X, cfg.eps, cfg.iters, cfg.budget, rng, sub_cfg)
