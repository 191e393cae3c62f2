"""Stateful per-user query monitor with threshold alarms and blocking."""

from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import QueryStream
from .mmd import MmdConfig, mmd_subsampled
from .models import Classifier, QueryTranscript
from .vae import LatentReference, VaeModel, encode_mu

DEFAULT_THRESHOLDS = ((0.25, "low"), (0.5, "medium"), (1.0, "high"), (1.5, "critical"))


@dataclass(frozen=True)
class AlarmEvent:
    user_id: str
    query_index: int
    mmd: float
    threshold: float
    severity: str

    def __post_init__(self):
        if not self.mmd > self.threshold:
            raise ValueError("an alarm needs mmd strictly above its threshold")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class Detector:
    """Frozen detector. ``embed`` overrides the VAE mean encoder (stub detectors)."""

    vae: VaeModel | None
    reference: LatentReference
    mmd_cfg: MmdConfig = MmdConfig()
    thresholds: tuple[tuple[float, str], ...] = DEFAULT_THRESHOLDS
    m: int = 100
    block_threshold: float = 0.25
    stride: int = 1
    embed: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        deltas = [t for t, _ in self.thresholds]
        if any(b <= a for a, b in zip(deltas, deltas[1:])):
            raise ValueError("thresholds must be strictly ascending")
        if self.m < self.mmd_cfg.N:
            raise ValueError(f"buffer size m={self.m} is smaller than subsample size N")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.vae is None and self.embed is None:
            raise ValueError("need a VAE or an embedding function")

    def encode(self, x: np.ndarray) -> np.ndarray:
        if self.embed is not None:
            return np.asarray(self.embed(x), dtype=np.float64)
        return encode_mu(self.vae, x)


@dataclass
class UserSession:
    user_id: str = "user"
    buffer: deque = field(default_factory=deque)
    queries_seen: int = 0
    checks: int = 0
    trace: list[tuple[int, float]] = field(default_factory=list)
    state: str = "active"
    severity: str | None = None

    @property
    def blocked(self) -> bool:
        return self.state == "blocked"


@dataclass(frozen=True)
class Observation:
    response_allowed: bool
    alarm: AlarmEvent | None = None
    mmd: float | None = None


def severity(mmd: float, thresholds: Sequence[tuple[float, str]]) -> tuple[float, str] | None:
    """Highest (delta, label) with delta < mmd, or None."""
    hit = None
    for delta, label in thresholds:
        if mmd > delta:
            hit = (delta, label)
    return hit


def observe(
    session: UserSession,
    x: np.ndarray,
    detector: Detector,
    mode: str = "monitor",
    on_alarm: Callable[[AlarmEvent], None] | None = None,
) -> Observation:
    """Process one query: embed, enqueue, evict beyond m, check, alarm, block."""
    if mode not in ("monitor", "defend"):
        raise ValueError(f"unknown mode {mode!r}")
    if session.blocked:
        session.queries_seen += 1
        return Observation(False)
    session.queries_seen += 1
    q = session.queries_seen
    z = detector.encode(np.asarray(x, dtype=np.float64)[None, :])[0]
    session.buffer.append(z)
    if len(session.buffer) <= detector.m:
        return Observation(True)
    session.buffer.popleft()
    session.checks += 1
    if (session.checks - 1) % detector.stride:
        return Observation(True)

    value = mmd_subsampled(detector.reference.u, np.asarray(session.buffer), detector.mmd_cfg, key=(q,))
    session.trace.append((q, value))
    alarm = None
    hit = severity(value, detector.thresholds)
    if hit is not None:
        alarm = AlarmEvent(session.user_id, q, value, hit[0], hit[1])
        session.state, session.severity = "alarmed", hit[1]
        if on_alarm is not None:
            on_alarm(alarm)
    allowed = True
    if mode == "defend" and value > detector.block_threshold:
        session.state = "blocked"
        allowed = False
        if alarm is None:
            alarm = AlarmEvent(session.user_id, q, value, detector.block_threshold, "block")
    return Observation(allowed, alarm, value)


@dataclass
class StreamResult:
    trace: list[tuple[int, float]]
    alarms: list[AlarmEvent]
    transcript: QueryTranscript
    session: UserSession

    def first_alarm(self, delta: float) -> int | None:
        return next((q for q, v in self.trace if v > delta), None)

    def alarmed(self, delta: float) -> bool:
        return self.first_alarm(delta) is not None

    def max_mmd(self) -> float:
        return max((v for _, v in self.trace), default=0.0)


def run_stream(
    stream: QueryStream | Iterable[np.ndarray],
    detector: Detector,
    classifier: Classifier | None = None,
    mode: str = "monitor",
    user_id: str = "user",
    responses: np.ndarray | None = None,
    on_alarm: Callable[[AlarmEvent], None] | None = None,
) -> StreamResult:
    """Pipe a stream through the monitor, collecting the answered transcript.

    ``responses`` supplies precomputed g(x) rows (as recorded while an
    adaptive attacker generated the stream); otherwise ``classifier`` answers.
    """
    if responses is None and isinstance(stream, QueryStream):
        responses = stream.responses
    session = UserSession(user_id)
    alarms: list[AlarmEvent] = []
    X = np.asarray(stream.X if isinstance(stream, QueryStream) else list(stream), dtype=np.float64)
    answered: list[int] = []
    truncation = None
    for i, x in enumerate(X):
        obs = observe(session, x, detector, mode, on_alarm)
        if obs.alarm is not None:
            alarms.append(obs.alarm)
        if obs.response_allowed:
            answered.append(i)
        elif truncation is None:
            truncation = len(answered)
    Xa = X[answered]
    if responses is not None:
        R = np.asarray(responses)[answered]
    elif classifier is not None and len(Xa):
        R = classifier.predict_proba(Xa)
    else:
        R = np.zeros((len(Xa), classifier.k if classifier else 0))
    return StreamResult(session.trace, alarms, QueryTranscript(Xa, R, truncation), session)


def trace_to_csv(trace: Sequence[tuple[int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_index", "mmd"])
    for q, v in trace:
        w.writerow([q, repr(float(v))])
    return buf.getvalue()


def read_trace_csv(text: str) -> list[tuple[int, float]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [(int(r["query_index"]), float(r["mmd"])) for r in rows]


def alarms_to_jsonl(alarms: Iterable[AlarmEvent]) -> str:
    return "".join(a.to_json() + "\n" for a in alarms)


def read_alarms_jsonl(text: str) -> list[AlarmEvent]:
    return [AlarmEvent(**json.loads(line)) for line in text.splitlines() if line.strip()]
