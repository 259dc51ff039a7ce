"""Server/client training loop with selective knowledge fusion.

One round: every client distils from the previous round's server logits on
the public train set and then trains on its private shard; the server then
walks the public train set in mini-batches and routes each sample to one of
four losses:

* ``self_train``   server already right: plain cross-entropy, and the fresh
                   logit is remembered in the global pool
* ``self_distill`` server wrong but the pool remembers a correct logit
* ``ensemble``     server wrong, nothing pooled: distil from an
                   entropy-weighted mix of the clients that get it right
* ``fallback``     nothing to distil from: plain cross-entropy

Only ``ensemble`` samples cost uplink traffic. ``fedgem`` mode skips the
routing and distils every sample from the uniform average of all clients;
``standalone`` mode trains server and clients on their own data only.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import attacks as atk
from .data import Dataset, FederatedData
from .learning import (AdamState, Classifier, CorruptLogitsError, OptimizerConfig, adam_step,
                       entropy_rows, softmax)
from .ledger import CommLedger, record_round

log = logging.getLogger(__name__)

SELF_TRAIN = "self_train"
SELF_DISTILL = "self_distill"
ENSEMBLE = "ensemble"
FALLBACK = "fallback"
BRANCHES = (SELF_TRAIN, SELF_DISTILL, ENSEMBLE, FALLBACK)

MODES = ("fedgems", "fedgem", "standalone")

ENTROPY_FLOOR = 1e-6  # 1/H is capped at 1/ENTROPY_FLOOR


class ProtocolError(RuntimeError):
    pass


class DivergenceError(ProtocolError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    rounds: int = 30
    mode: str = "fedgems"
    self_train_on: bool = True
    self_distill_on: bool = True
    ensemble_distill_on: bool = True
    local_epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    server_hidden_dim: int = 64
    client_hidden_dims: tuple = (0,)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    attack: atk.AttackSpec | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (self.self_train_on or self.self_distill_on or self.ensemble_distill_on):
            raise ValueError("at least one server branch must be enabled")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("local_epochs must be >= 0 and batch_size >= 1")
        if self.server_hidden_dim < 0 or not self.client_hidden_dims:
            raise ValueError("bad model dimensions")

    @property
    def kd_weight(self) -> float:
        return self.optimizer.kd_weight


@dataclass
class GlobalLogitPool:
    """Last correct server logit per public-train index."""

    size: int
    class_count: int
    present: np.ndarray = None
    logits: np.ndarray = None

    def __post_init__(self):
        if self.present is None:
            self.present = np.zeros(self.size, dtype=bool)
        if self.logits is None:
            self.logits = np.zeros((self.size, self.class_count))

    def __contains__(self, idx) -> bool:
        return bool(self.present[idx])

    def __len__(self) -> int:
        return int(self.present.sum())

    def get(self, idx) -> np.ndarray:
        if not self.present[idx]:
            raise KeyError(idx)
        return self.logits[idx]

    def store(self, indices, logits) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        self.logits[indices] = logits
        self.present[indices] = True

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.present)


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    round: int
    indices: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("report indices must be strictly ascending")
        if np.asarray(self.logits).shape[0] != idx.size:
            raise ValueError("one logit row per index required")

    def row(self, index: int) -> np.ndarray:
        pos = np.searchsorted(self.indices, index)
        if pos >= len(self.indices) or self.indices[pos] != index:
            raise ProtocolError(f"client {self.client_id} did not report sample {index}")
        return self.logits[pos]


@dataclass
class Participant:
    """A model together with its optimizer state and (for clients) private data."""

    model: Classifier
    opt: AdamState
    client_id: int = -1
    train: Dataset | None = None
    test: Dataset | None = None

    @classmethod
    def create(cls, input_dim, class_count, hidden_dim, rng, **kw) -> "Participant":
        model = Classifier.init(input_dim, class_count, hidden_dim, rng)
        return cls(model, AdamState.zeros(model.n_params), **kw)

    def step(self, X, y, cfg: OptimizerConfig, mix=None, targets=None) -> float:
        try:
            loss, grad, _ = self.model.loss_and_grad(X, y, mix, targets, cfg.temperature)
        except CorruptLogitsError as e:
            raise DivergenceError(str(e)) from e
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss}")
        self.model.params, self.opt = adam_step(self.model.params, grad, self.opt, cfg)
        return loss


# --- selection rules -------------------------------------------------------

def classify_reliability(reports: Sequence[ClientReport], label: int, index: int):
    """Split client ids into (reliable, unreliable) by whether argmax hits ``label``.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class id.
    """
    reliable, unreliable = [], []
    for r in reports:
        (reliable if int(np.argmax(r.row(index))) == label else unreliable).append(r.client_id)
    return reliable, unreliable


def entropy_weights(logits: np.ndarray, labels: np.ndarray, temperature: float = 1.0):
    """Aggregation weights and client distributions for a stack of reports.

    ``logits`` has shape (K, B, C) with clients in ascending id order.
    Returns ``(weights (K, B), probs (K, B, C))``; columns with no reliable
    client are all zero.
    """
    probs = softmax(logits, temperature)
    reliable = logits.argmax(axis=2) == labels[None, :]
    inv_h = 1.0 / np.maximum(entropy_rows(probs), ENTROPY_FLOOR)
    scores = np.where(reliable, inv_h, -np.inf)
    top = scores.max(axis=0, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(reliable, np.exp(scores - top), 0.0)
    total = e.sum(axis=0, keepdims=True)
    weights = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    return weights, probs


def compute_weights(reports: Sequence[ClientReport], label: int, index: int,
                    temperature: float = 1.0) -> dict:
    """Per-client weight for one sample; unreliable clients get exactly 0."""
    stack = np.stack([r.row(index) for r in reports])[:, None, :]
    w, _ = entropy_weights(stack, np.array([label]), temperature)
    return {r.client_id: float(w[i, 0]) for i, r in enumerate(reports)}


def ensemble_target(weights: np.ndarray, probs: np.ndarray) -> np.ndarray:
    # summed in client-id order so the result is independent of who arrived first
    out = np.zeros(probs.shape[1:])
    for k in range(probs.shape[0]):
        out += weights[k][:, None] * probs[k]
    return out


def route_sample(server_logits, label: int, pool: GlobalLogitPool, index: int,
                 reliable_count: int | None = None, cfg: ProtocolConfig | None = None) -> str:
    """Pick the loss for one public sample.

    Disabled branches fall through to the next one in the chain
    self_train -> self_distill -> ensemble -> fallback. ``reliable_count=None``
    means the clients have not been asked yet.
    """
    cfg = cfg or ProtocolConfig()
    if cfg.self_train_on and int(np.argmax(server_logits)) == label:
        return SELF_TRAIN
    if cfg.self_distill_on and index in pool:
        return SELF_DISTILL
    if cfg.ensemble_distill_on and (reliable_count is None or reliable_count > 0):
        return ENSEMBLE
    return FALLBACK


# --- client side -----------------------------------------------------------

def client_select(clients: Sequence[Participant], public: Dataset, indices,
                  attack: atk.AttackSpec | None = None, round_: int = 0):
    """Reports of every client on the requested public indices, possibly poisoned.

    Returns ``(reports, victim_ids)`` with reports in ascending client-id order.
    """
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if idx.size == 0:
        return [], []
    ordered = sorted(clients, key=lambda c: c.client_id)
    Xs = public.X[idx]
    reports = [ClientReport(c.client_id, round_, idx, c.model.forward(Xs)) for c in ordered]
    return atk.apply_attack(reports, attack, round_)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def client_train(client: Participant, server_logits, public: Dataset, cfg: ProtocolConfig,
                 round_: int = 0) -> Participant:
    """Distil from the server on public data, then fit the private shard."""
    opt = cfg.optimizer
    if server_logits is not None:
        server_logits = np.asarray(server_logits)
        if server_logits.shape != (len(public), public.class_count):
            raise ProtocolError("server logits must cover the whole public train set")
        rng = np.random.default_rng([cfg.seed, 4, round_, client.client_id])
        for b in _batches(len(public), cfg.batch_size, rng):
            targets = softmax(server_logits[b], opt.temperature)
            client.step(public.X[b], public.y[b], opt, np.full(b.size, opt.kd_weight), targets)
    if client.train is None or len(client.train) == 0:
        log.warning("client %d has an empty private shard; skipping local training",
                    client.client_id)
        return client
    for epoch in range(cfg.local_epochs):
        rng = np.random.default_rng([cfg.seed, 5, round_, client.client_id, epoch])
        for b in _batches(len(client.train), cfg.batch_size, rng):
            client.step(client.train.X[b], client.train.y[b], opt)
    return client


# --- server side -----------------------------------------------------------

@dataclass
class ServerRoundResult:
    counts: dict
    uploads: np.ndarray  # logits uploaded per client id
    server_logits: np.ndarray
    victims: list


def server_round(server: Participant, public: Dataset, pool: GlobalLogitPool,
                 clients: Sequence[Participant], cfg: ProtocolConfig,
                 round_: int = 0) -> ServerRoundResult:
    opt = cfg.optimizer
    N, C = len(public), public.class_count
    K = len(clients)
    counts = dict.fromkeys(BRANCHES, 0)
    uploads = np.zeros(K, dtype=np.int64)
    server_logits = np.zeros((N, C))
    victims: set = set()
    rng = np.random.default_rng([cfg.seed, 3, round_])

    for b in _batches(N, cfg.batch_size, rng):
        X, y = public.X[b], public.y[b]
        mix = np.ones(b.size)
        targets = np.zeros((b.size, C))

        if cfg.mode == "standalone":
            branches = [FALLBACK] * b.size
        elif cfg.mode == "fedgem":
            branches = [ENSEMBLE] * b.size
            reports, bad = client_select(clients, public, b, cfg.attack, round_)
            victims.update(bad)
            uploads += b.size
            stack = np.stack([r.logits for r in reports])
            probs = softmax(stack, opt.temperature)
            avg = probs.mean(axis=0)
            pos = np.searchsorted(reports[0].indices, b)
            targets[:] = avg[pos]
            mix[:] = opt.kd_weight
        else:
            z = server.model.forward(X)
            branches = [route_sample(z[i], int(y[i]), pool, int(b[i]), None, cfg)
                        for i in range(b.size)]
            ask = np.array([i for i, br in enumerate(branches) if br == ENSEMBLE], dtype=np.int64)
            if ask.size:
                reports, bad = client_select(clients, public, b[ask], cfg.attack, round_)
                victims.update(bad)
                uploads += len(reports[0].indices)
                stack = np.stack([r.logits for r in reports])
                pos = np.searchsorted(reports[0].indices, b[ask])
                w, probs = entropy_weights(stack[:, pos], y[ask], opt.temperature)
                tgt = ensemble_target(w, probs)
                n_rel = (w > 0).sum(axis=0)
                for j, i in enumerate(ask):
                    if n_rel[j] == 0:
                        branches[i] = FALLBACK
                    else:
                        targets[i] = tgt[j]
                        mix[i] = opt.kd_weight
            for i, br in enumerate(branches):
                if br == SELF_DISTILL:
                    targets[i] = softmax(pool.get(int(b[i])), opt.temperature)
                    mix[i] = opt.kd_weight

        for br in branches:
            counts[br] += 1
        try:
            server.step(X, y, opt, mix, targets)
        except DivergenceError as e:
            raise DivergenceError(f"server diverged in round {round_}: {e}") from e

        z_post = server.model.forward(X)
        server_logits[b] = z_post
        if cfg.mode == "fedgems" and cfg.self_train_on:
            ok = z_post.argmax(axis=1) == y
            pool.store(b[ok], z_post[ok])

    return ServerRoundResult(counts, uploads, server_logits, sorted(victims))


# --- experiment loop -------------------------------------------------------

METRIC_COLUMNS = (
    "round", "server_acc", "client_acc_mean", "client_acc_min", "client_acc_max",
    "n_selftrain", "n_selfdistill", "n_ensemble", "n_fallback", "kb_up_cum", "kb_down_cum",
    "client_private_acc_mean", "uploaded_logits", "attack_kind", "attack_victims",
)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    server_acc: float
    client_acc_mean: float
    client_acc_min: float
    client_acc_max: float
    n_selftrain: int
    n_selfdistill: int
    n_ensemble: int
    n_fallback: int
    kb_up_cum: float
    kb_down_cum: float
    client_private_acc_mean: float
    uploaded_logits: int
    attack_kind: str = "none"
    attack_victims: str = ""

    def as_row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]

    def get(self, key, default=None):
        return getattr(self, key, default)


def accuracy(model: Classifier, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(model.predict(ds.X) == ds.y))


@dataclass
class ExperimentResult:
    metrics: list
    ledger: CommLedger
    server: Participant
    clients: list
    pool: GlobalLogitPool
    server_logits: np.ndarray | None

    @property
    def final(self) -> RoundMetrics:
        return self.metrics[-1]


def make_participants(cfg: ProtocolConfig, data: FederatedData):
    d, C = data.public_train.input_dim, data.public_train.class_count
    server = Participant.create(d, C, cfg.server_hidden_dim, np.random.default_rng([cfg.seed, 1]))
    dims = cfg.client_hidden_dims
    clients = [
        Participant.create(d, C, dims[k % len(dims)], np.random.default_rng([cfg.seed, 2, k]),
                           client_id=k, train=data.client_train[k], test=data.client_test[k])
        for k in range(data.plan.client_count)
    ]
    return server, clients


def run_experiment(cfg: ProtocolConfig, data: FederatedData,
                   on_round: Callable[[RoundMetrics], None] | None = None,
                   state: tuple | None = None, start_round: int = 1) -> ExperimentResult:
    """Run rounds ``start_round..cfg.rounds``.

    ``state`` optionally resumes from ``(server, clients, pool, server_logits)``.
    ``on_round`` sees each metrics row as soon as it exists.
    """
    public, test = data.public_train, data.public_test
    N, C = len(public), public.class_count
    if state is None:
        server, clients = make_participants(cfg, data)
        pool = GlobalLogitPool(N, C)
        server_logits = None
    else:
        server, clients, pool, server_logits = state
    K = len(clients)
    ledger = CommLedger(C)
    metrics: list = []
    attack_kind = cfg.attack.kind if cfg.attack else "none"

    for t in range(start_round, cfg.rounds + 1):
        kd_logits = server_logits if cfg.mode != "standalone" else None
        for c in clients:
            client_train(c, kd_logits, public, cfg, t)
        res = server_round(server, public, pool, clients, cfg, t)
        if cfg.mode != "standalone":
            server_logits = res.server_logits
            record_round(ledger, t, res.uploads.tolist(), [N] * K)

        client_accs = [accuracy(c.model, test) for c in clients]
        private = [accuracy(c.model, c.test) for c in clients if c.test is not None and len(c.test)]
        row = RoundMetrics(
            round=t,
            server_acc=accuracy(server.model, test),
            client_acc_mean=float(np.mean(client_accs)),
            client_acc_min=float(np.min(client_accs)),
            client_acc_max=float(np.max(client_accs)),
            n_selftrain=res.counts[SELF_TRAIN],
            n_selfdistill=res.counts[SELF_DISTILL],
            n_ensemble=res.counts[ENSEMBLE],
            n_fallback=res.counts[FALLBACK],
            kb_up_cum=ledger.cumulative_up_kb,
            kb_down_cum=ledger.cumulative_down_kb,
            client_private_acc_mean=float(np.mean(private)) if private else float("nan"),
            uploaded_logits=int(res.uploads.sum()),
            attack_kind=attack_kind,
            attack_victims=" ".join(map(str, res.victims)),
        )
        metrics.append(row)
        if on_round is not None:
            on_round(row)
    return ExperimentResult(metrics, ledger, server, clients, pool, server_logits)


# --- checkpoints -----------------------------------------------------------
#
# Little-endian layout, version 1:
#   magic    4s   b"FGCK"
#   version  u32
#   round    u32
#   n_models u32                         server first, then clients by id
#   per model:
#     input_dim, hidden_dim, class_count u32 x3
#     n_params u64, adam_t u64
#     params, adam_m, adam_v             f64 x n_params each
#   pool: size u64, class_count u32, present u8 x size, logits f64 x size*C
#   server logits: rows u64 (0 if absent), f64 x rows*C
#   sha256 of everything above           32 bytes

CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1


def dump_checkpoint(path, round_: int, server: Participant, clients: Sequence[Participant],
                    pool: GlobalLogitPool, server_logits=None) -> None:
    parts = [struct.pack("<4sIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, round_, 1 + len(clients))]
    for p in [server, *sorted(clients, key=lambda c: c.client_id)]:
        m = p.model
        parts.append(struct.pack("<IIIQQ", m.input_dim, m.hidden_dim, m.class_count,
                                 m.n_params, p.opt.t))
        for arr in (m.params, p.opt.m, p.opt.v):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(struct.pack("<QI", pool.size, pool.class_count))
    parts.append(pool.present.astype("u1").tobytes())
    parts.append(np.ascontiguousarray(pool.logits, dtype="<f8").tobytes())
    if server_logits is None:
        parts.append(struct.pack("<Q", 0))
    else:
        parts.append(struct.pack("<Q", len(server_logits)))
        parts.append(np.ascontiguousarray(server_logits, dtype="<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path, clients_data: FederatedData | None = None) -> dict:
    """Read a checkpoint written by `dump_checkpoint`.

    Returns a dict with ``round``, ``server``, ``clients``, ``pool`` and
    ``server_logits``. Client train/test shards are re-attached from
    ``clients_data`` when given.
    """
    raw = open(path, "rb").read()
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ProtocolError(f"{path}: checksum mismatch")
    magic, version, round_, n_models = struct.unpack_from("<4sIII", body, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ProtocolError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    off = 16

    def take(count):
        nonlocal off
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    parts = []
    for _ in range(n_models):
        d, h, c, n, t = struct.unpack_from("<IIIQQ", body, off)
        off += struct.calcsize("<IIIQQ")
        params, m, v = take(n), take(n), take(n)
        parts.append(Participant(Classifier(d, c, h, params), AdamState(m, v, t)))
    size, C = struct.unpack_from("<QI", body, off)
    off += struct.calcsize("<QI")
    present = np.frombuffer(body, dtype="u1", count=size, offset=off).astype(bool)
    off += size
    pool = GlobalLogitPool(size, C, present, take(size * C).reshape(size, C))
    (rows,) = struct.unpack_from("<Q", body, off)
    off += 8
    server_logits = take(rows * C).reshape(rows, C) if rows else None
    server, clients = parts[0], parts[1:]
    for k, c in enumerate(clients):
        c.client_id = k
        if clients_data is not None:
            c.train, c.test = clients_data.client_train[k], clients_data.client_test[k]
    return {"round": round_, "server": server, "clients": clients, "pool": pool,
            "server_logits": server_logits}


__all__ = [
    "ProtocolConfig", "GlobalLogitPool", "ClientReport", "Participant", "RoundMetrics",
    "ExperimentResult", "classify_reliability", "compute_weights", "entropy_weights",
    "ensemble_target", "route_sample", "client_select", "client_train", "server_round",
    "run_experiment", "dump_checkpoint", "load_checkpoint", "METRIC_COLUMNS", "BRANCHES",
    "SELF_TRAIN", "SELF_DISTILL", "ENSEMBLE", "FALLBACK",
]
