"""Experiment drivers: training, threshold sweeps, defended extraction,
latent projections, encoder evasion and stream replay.

Every driver is a pure function of the config: seeds are derived per stage
from ``cfg.seed`` and nothing time-dependent is written.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import attacks
from ..attacks import AttackConfig, DilutionSchedule, evasion_grid, evasion_to_csv, fgsm_perturb
from ..data import (
    Dataset,
    QueryStream,
    SplitBundle,
    benign_stream,
    gen_npd_pool,
    gen_synthetic_dataset,
    load_raw_tensors,
    make_outlier_dataset,
    split_holdout_classes,
)
from ..models import (
    Classifier,
    QueryTranscript,
    TrainConfig,
    accuracy,
    substitute_config,
    train_classifier,
    train_substitute,
)
from ..monitor import DEFAULT_THRESHOLDS, Detector, StreamResult, alarms_to_jsonl, run_stream, trace_to_csv
from ..numerics import Rng
from ..vae import LatentReference, LatentTargets, VaeModel, build_reference, encode_mu, train_vardetect_vae
from .checkpoint import load_trained, save_trained
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("querywatch")

STREAMS = ("PD", "AltPD", "Syn", "AdvPD", "NPD")
# attack stream name -> attack kind used for substitute epochs
ATTACK_OF = {"Syn": "syn_uniform", "JbDA": "jbda", "NPD": "npd"}


def _event(name: str, **fields):
    log.info(name, extra={"fields": fields})


def write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


@dataclass
class DataBundle:
    split: SplitBundle
    outliers: Dataset
    pool: Dataset


@dataclass
class Models:
    g: Classifier
    vae: VaeModel
    reference: LatentReference


class Run:
    """Lazily materialised data, models and streams for one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._data: DataBundle | None = None
        self._models: Models | None = None
        self._streams: dict[tuple[str, int], QueryStream] = {}

    @property
    def out(self) -> Path:
        return Path(self.cfg.out)

    @property
    def checkpoint_dir(self) -> Path:
        return self.out / "checkpoint"

    @property
    def data(self) -> DataBundle:
        if self._data is None:
            self._data = prepare_data(self.cfg)
        return self._data

    @property
    def models(self) -> Models:
        if self._models is None:
            g, vae, ref = load_trained(self.checkpoint_dir)
            self._models = Models(g, vae, ref)
        return self._models

    def targets(self) -> LatentTargets:
        v = self.cfg.vae
        return LatentTargets.default(v.latent_dim, v.offset, v.rho)

    def detector(self, m: int | None = None) -> Detector:
        d = self.cfg.detector
        return Detector(
            self.models.vae,
            self.models.reference,
            self.cfg.mmd_config(),
            DEFAULT_THRESHOLDS,
            d.m if m is None else m,
            d.block_threshold,
            d.stride,
        )

    def stream(self, name: str, length: int) -> QueryStream:
        key = (name, length)
        if key not in self._streams:
            self._streams[key] = make_stream(self, name, length)
        return self._streams[key]


def prepare_data(cfg: ExperimentConfig) -> DataBundle:
    d = cfg.data
    if d.path is not None:
        if not Path(d.path).exists():
            raise ConfigError("data.path", f"{d.path} does not exist")
        ds = load_raw_tensors(d.path)
    else:
        ds = gen_synthetic_dataset(
            d.d, d.k, d.n_per_class, d.spread, Rng(cfg.sub_seed("data")), class_sep=d.class_sep
        )
    split = split_holdout_classes(ds, d.holdout_fraction, d.test_fraction, Rng(cfg.sub_seed("split")))
    outliers = make_outlier_dataset(split.train, Rng(cfg.sub_seed("outliers")))
    if d.npd_pool_path is not None:
        if not Path(d.npd_pool_path).exists():
            raise ConfigError("data.npd_pool_path", f"{d.npd_pool_path} does not exist")
        pool = load_raw_tensors(d.npd_pool_path)
    else:
        pool = gen_npd_pool(ds.d, d.npd_pool_size, Rng(cfg.sub_seed("npd_pool")))
    return DataBundle(split, outliers, pool)


def _substitute_base(run: Run, name: str) -> TrainConfig:
    a = run.cfg.attack
    return TrainConfig(hidden=a.substitute_hidden, seed=run.cfg.sub_seed(f"substitute/{name}"))


def make_stream(run: Run, name: str, length: int) -> QueryStream:
    """Named query stream of ``length`` queries with the oracle's answers attached."""
    cfg, data, g = run.cfg, run.data, run.models.g
    a = cfg.attack
    seed = cfg.sub_seed(f"stream/{name}/{length}")
    if name in ("PD", "AltPD"):
        src = data.split.test if name == "PD" else data.split.held_out
        s = benign_stream(name, src, length, Rng(seed))
        return QueryStream(s.X, s.tags, s.seed, g.predict_proba(s.X))
    if name == "Syn":
        ac = AttackConfig("syn_uniform", budget=length, seed=seed)
        return attacks.run_attack(ac, g)
    if name in ("AdvPD", "JbDA"):
        kind = a.fgsm_kind if name == "AdvPD" else "jbda"
        ac = AttackConfig(
            kind, budget=length, seed=seed, eps=a.eps, iters=a.iters,
            seed_sample_count=a.seed_sample_count,
        )
        sub_cfg = substitute_config(kind, _substitute_base(run, name))
        return attacks.run_attack(ac, g, seeds=data.split.test, sub_cfg=sub_cfg)
    if name == "NPD":
        if length > len(data.pool):
            raise ConfigError("data.npd_pool_size", f"pool of {len(data.pool)} cannot cover {length} queries")
        ac = AttackConfig(
            "npd", budget=length, seed=seed, npd_strategy=a.npd_strategy, npd_rounds=a.npd_rounds
        )
        sub_cfg = substitute_config("npd", _substitute_base(run, name))
        return attacks.run_attack(ac, g, pool=data.pool, sub_cfg=sub_cfg)
    raise ValueError(f"unknown stream {name!r}")


# train


def latent_separation(vae: VaeModel, targets: LatentTargets, C: np.ndarray, O: np.ndarray):
    """Fractions of C / O embeddings on the correct side of the midpoint hyperplane."""
    w = targets.mu_O - targets.mu_C
    b = 0.5 * (targets.mu_O + targets.mu_C) @ w
    side_c = float(np.mean(encode_mu(vae, C) @ w < b))
    side_o = float(np.mean(encode_mu(vae, O) @ w > b))
    return side_c, side_o


def cmd_train(run: Run) -> dict:
    cfg, data = run.cfg, run.data
    _event("train.start", seed=cfg.seed, n_train=len(data.split.train), n_outliers=len(data.outliers))
    g = train_classifier(data.split.train, cfg.classifier_train_config())
    g_acc = accuracy(g, data.split.test)
    _event("train.classifier", test_accuracy=g_acc)
    targets = run.targets()
    vae = train_vardetect_vae(data.split.train, data.outliers, targets, cfg.vae_config())
    ref = build_reference(vae, data.split.train)
    side_c, side_o = latent_separation(vae, targets, data.split.train.X, data.outliers.X)
    _event("train.vae", epochs=len(vae.history), final_loss=vae.history[-1], side_C=side_c, side_O=side_o)
    save_trained(run.checkpoint_dir, g, vae, ref)
    run._models = Models(g, vae, ref)
    report = {
        "classifier_test_accuracy": g_acc,
        "vae_epochs": len(vae.history),
        "vae_final_loss": vae.history[-1],
        "latent_separation_C": side_c,
        "latent_separation_O": side_o,
        "reference_size": len(ref),
    }
    _write_json(run.out / "train_report.json", report)
    # the output location is not part of the run's content
    saved = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    _write_json(run.out / "config.json", saved)
    return report


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# sweep


@dataclass
class SweepReport:
    results: dict[str, StreamResult]
    matrix: dict[float, dict[str, bool]]
    summary: list[dict] = field(default_factory=list)

    def alarmed(self, stream: str, delta: float) -> bool:
        return self.matrix[delta][stream]


def steady_state_mean(result: StreamResult) -> float:
    """Mean MMD over the second half of the checks."""
    vals = [v for _, v in result.trace]
    return float(np.mean(vals[len(vals) // 2 :])) if vals else 0.0


def alarm_matrix(results: dict[str, StreamResult], deltas) -> dict[float, dict[str, bool]]:
    matrix = {float(d): {n: r.alarmed(d) for n, r in results.items()} for d in deltas}
    ds = sorted(matrix)
    for n in results:
        for lo, hi in zip(ds, ds[1:]):
            if matrix[hi][n] and not matrix[lo][n]:
                raise AssertionError(f"alarm matrix not monotone for {n} between {lo} and {hi}")
    return matrix


def cmd_sweep(run: Run, streams=STREAMS) -> SweepReport:
    cfg = run.cfg
    det = run.detector()
    L = cfg.attack.stream_length
    results: dict[str, StreamResult] = {}
    all_alarms = []
    for name in streams:
        s = run.stream(name, L)
        res = run_stream(s, det, mode="monitor", user_id=name)
        results[name] = res
        all_alarms.extend(res.alarms)
        path = run.out / "traces" / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(trace_to_csv(res.trace))
        _event("sweep.stream", stream=name, checks=len(res.trace), max_mmd=res.max_mmd())
    matrix = alarm_matrix(results, cfg.detector.deltas)
    write_csv(
        run.out / "alarm_matrix.csv",
        ["threshold", *streams],
        ([d, *("alarm" if matrix[d][n] else "no_alarm" for n in streams)] for d in sorted(matrix)),
    )
    delta = cfg.detector.block_threshold
    summary = []
    for name, res in results.items():
        first = res.first_alarm(delta)
        summary.append(
            {
                "stream": name,
                "checks": len(res.trace),
                "mean_mmd": float(np.mean([v for _, v in res.trace])),
                "steady_mmd": steady_state_mean(res),
                "max_mmd": res.max_mmd(),
                "first_alarm_query": "" if first is None else first,
                "checks_to_alarm": "" if first is None else first - cfg.detector.m,
            }
        )
    header = list(summary[0])
    write_csv(run.out / "stream_summary.csv", header, ([row[h] for h in header] for row in summary))
    (run.out / "alarms.jsonl").write_text(alarms_to_jsonl(all_alarms))
    return SweepReport(results, matrix, summary)


# defended extraction


def transferability(sub: Classifier, g: Classifier, X: np.ndarray, eps: float) -> float:
    """Fraction of single-step FGSM examples crafted on ``sub`` that flip g's label."""
    adv = fgsm_perturb(sub, X, "fgsm_n", eps, 1, Rng(0))
    return float(np.mean(g.predict(adv) != g.predict(X)))


def cmd_defend_eval(run: Run) -> list[dict]:
    cfg, g = run.cfg, run.models.g
    test = run.data.split.test
    det = run.detector()
    rows = []
    for name in cfg.attack.defend_attacks:
        s = run.stream(name, cfg.attack.budget)
        kind = ATTACK_OF.get(name, cfg.attack.fgsm_kind)
        sub_cfg = substitute_config(kind, _substitute_base(run, name))
        undefended = QueryTranscript(s.X, s.responses)
        defended = run_stream(s, det, mode="defend", user_id=name).transcript
        for setting, t in (("undefended", undefended), ("defended", defended)):
            sub = train_substitute(t, kind, sub_cfg, d=g.d, k=g.k)
            row = {
                "attack": name,
                "setting": setting,
                "answered": len(t.answered()),
                "accuracy": accuracy(sub, test),
                "transferability": transferability(sub, g, test.X, cfg.attack.transfer_eps),
            }
            rows.append(row)
            _event("defend.result", **row)
    header = ["attack", "setting", "answered", "accuracy", "transferability"]
    write_csv(run.out / "defense.csv", header, ([r[h] for h in header] for r in rows))
    return rows


# projection


def pca3(Z: np.ndarray) -> tuple[np.ndarray, int]:
    """First three principal coordinates of ``Z`` and the number of effective components.

    Missing components (rank < 3) are zero-padded. Signs are fixed so each
    component's largest-magnitude loading is positive.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Zc = Z - Z.mean(axis=0)
    _, S, Vt = np.linalg.svd(Zc, full_matrices=False)
    tol = max(Zc.shape) * np.finfo(float).eps * (S[0] if S.size else 0.0)
    rank = int(np.sum(S > tol)) if S.size and S[0] > 0 else 0
    n = min(3, rank)
    comps = Vt[:n]
    signs = np.sign(comps[np.arange(n), np.abs(comps).argmax(axis=1)])
    coords = np.zeros((len(Z), 3))
    coords[:, :n] = Zc @ (comps * signs[:, None]).T
    return coords, rank


def cmd_project(run: Run) -> Path:
    cfg, data, vae = run.cfg, run.data, run.models.vae
    n = cfg.project.samples_per_set
    sets = {}
    for name in cfg.project.sets:
        if name == "D_C":
            X = data.split.train.X
        elif name == "D_O":
            X = data.outliers.X
        else:
            X = run.stream(name, cfg.attack.stream_length).X
        idx = Rng(cfg.sub_seed(f"project/{name}")).generator().permutation(len(X))[:n]
        sets[name] = encode_mu(vae, X[np.sort(idx)])
    Z = np.concatenate(list(sets.values()))
    coords, rank = pca3(Z)
    if rank < 3:
        warnings.warn(f"embeddings span only {rank} dimension(s); padding with zeros")
        _event("project.padded", rank=rank)
    labels = [name for name, E in sets.items() for _ in range(len(E))]
    return write_csv(
        run.out / "projection.csv",
        ["set", "comp1", "comp2", "comp3"],
        ([lab, *map(float, c)] for lab, c in zip(labels, coords)),
    )


# encoder evasion


def cmd_evasion(run: Run) -> list[dict]:
    cfg, vae = run.cfg, run.models.vae
    ev = cfg.evasion
    det = run.detector()
    rows = []
    for name in ev.sources:
        X = run.stream(name, cfg.attack.stream_length).X[: ev.samples]
        records = evasion_grid(vae, run.targets(), X, ev.eps_grid, ev.iters, ev.ascend)
        path = run.out / "evasion" / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(evasion_to_csv(records))
        for rec in records:
            res = run_stream(QueryStream.tagged(rec.x_final, "perturbed"), det, mode="monitor")
            first = res.first_alarm(cfg.detector.block_threshold)
            row = {
                "source": name,
                "epsilon": rec.epsilon,
                "initial_distance": float(rec.trace[0]),
                "final_distance": float(rec.trace[-1]),
                "alarmed": first is not None,
                "first_alarm_query": "" if first is None else first,
                "max_mmd": res.max_mmd(),
            }
            rows.append(row)
            _event("evasion.result", **row)
    header = ["source", "epsilon", "initial_distance", "final_distance", "alarmed", "first_alarm_query", "max_mmd"]
    write_csv(run.out / "evasion_report.csv", header, ([r[h] for h in header] for r in rows))
    return rows


# replay


def replay(run: Run, stream: QueryStream, label: str, mode: str | None = None) -> StreamResult:
    res = run_stream(stream, run.detector(), classifier=run.models.g, mode=mode or run.cfg.mode, user_id=label)
    (run.out / "replay").mkdir(parents=True, exist_ok=True)
    (run.out / "replay" / f"{label}.csv").write_text(trace_to_csv(res.trace))
    (run.out / "replay" / f"{label}.jsonl").write_text(alarms_to_jsonl(res.alarms))
    return res


def window_invariant(stream: QueryStream, p: int, period: int = 100, benign_tag: str = "PD") -> bool:
    """Every complete aligned window holds exactly ``p`` attack queries."""
    is_attack = np.array([t != benign_tag for t in stream.tags])
    full = len(is_attack) // period
    counts = is_attack[: full * period].reshape(full, period).sum(axis=1)
    return bool(np.all(counts == p))


def cmd_spaced_out(run: Run, dilutions=None) -> list[dict]:
    cfg = run.cfg
    L = cfg.attack.stream_length
    attack = run.stream(cfg.attack.dilution_source, L)
    benign = run.stream("PD", L)
    rows = []
    for p in dilutions or cfg.attack.dilutions:
        sched = DilutionSchedule(p, benign)
        s = attacks.spaced_out_stream(attack, sched)
        s = QueryStream(s.X, s.tags, s.seed, s.responses)
        res = replay(run, s, f"spaced_{p:g}", mode="monitor")
        first = res.first_alarm(cfg.detector.block_threshold)
        row = {
            "dilution": float(p),
            "attack_per_period": sched.attack_per_period,
            "queries": len(s),
            "alarmed": first is not None,
            "first_alarm_query": "" if first is None else first,
            "max_mmd": res.max_mmd(),
            "window_invariant": window_invariant(s, sched.attack_per_period),
        }
        rows.append(row)
        _event("spaced_out.result", **row)
    header = list(rows[0]) if rows else []
    write_csv(run.out / "dilution.csv", header, ([r[h] for h in header] for r in rows))
    return rows


def cmd_monitor_replay(run: Run, stream_name: str | None = None, stream_path: str | None = None) -> StreamResult:
    if (stream_name is None) == (stream_path is None):
        raise ConfigError("--stream", "give exactly one of a stream name or --stream-path")
    if stream_path is not None:
        if not Path(stream_path).exists():
            raise ConfigError("--stream-path", f"{stream_path} does not exist")
        ds = load_raw_tensors(stream_path)
        s = QueryStream.tagged(ds.X, "loaded")
        label = Path(stream_path).name
    else:
        if stream_name not in (*STREAMS, "JbDA"):
            raise ConfigError("--stream", f"unknown stream {stream_name!r}")
        s = run.stream(stream_name, run.cfg.attack.stream_length)
        label = stream_name
    res = replay(run, s, label)
    _event("replay.done", stream=label, checks=len(res.trace), alarms=len(res.alarms))
    return res


def run_all(run: Run) -> None:
    cmd_train(run)
    cmd_sweep(run)
    cmd_defend_eval(run)
    cmd_project(run)
    cmd_evasion(run)
    cmd_spaced_out(run)
