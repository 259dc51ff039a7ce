"""Communication-cost bookkeeping for logit exchange."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

BYTES_PER_SCALAR = 4
KB = 1024


def cost_per_logit(class_count: int, bytes_per_scalar: int = BYTES_PER_SCALAR) -> float:
    """KB needed to ship one logit vector."""
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    return class_count * bytes_per_scalar / KB


def full_upload_round_cost(n_public: int, class_count: int, client_count: int,
                           bytes_per_scalar: int = BYTES_PER_SCALAR) -> float:
    """KB uploaded in one round when every client sends logits for every public sample."""
    if min(n_public, class_count, client_count) < 1:
        raise ValueError("all arguments must be >= 1")
    return client_count * n_public * class_count * bytes_per_scalar / KB


@dataclass(frozen=True)
class CommEvent:
    round: int
    direction: str  # "up" | "down"
    party: int
    logit_count: int
    bytes: int


@dataclass
class CommLedger:
    class_count: int
    bytes_per_scalar: int = BYTES_PER_SCALAR
    events: list = field(default_factory=list)
    cumulative_up_kb: float = 0.0
    cumulative_down_kb: float = 0.0

    def append(self, round_: int, direction: str, party: int, logit_count: int) -> CommEvent:
        if direction not in ("up", "down"):
            raise ValueError(f"bad direction {direction!r}")
        if logit_count < 0:
            raise ValueError("logit_count must be >= 0")
        ev = CommEvent(round_, direction, int(party), int(logit_count),
                       int(logit_count) * self.class_count * self.bytes_per_scalar)
        self.events.append(ev)
        if direction == "up":
            self.cumulative_up_kb += ev.bytes / KB
        else:
            self.cumulative_down_kb += ev.bytes / KB
        return ev

    def cumulative_kb_through(self, round_: int) -> tuple[float, float]:
        up = sum(e.bytes for e in self.events if e.round <= round_ and e.direction == "up")
        down = sum(e.bytes for e in self.events if e.round <= round_ and e.direction == "down")
        return up / KB, down / KB

    def replay(self) -> "CommLedger":
        fresh = CommLedger(self.class_count, self.bytes_per_scalar)
        for e in self.events:
            fresh.append(e.round, e.direction, e.party, e.logit_count)
        return fresh

    def write_csv(self, path, extra: Mapping | None = None) -> None:
        extra = dict(extra or {})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "direction", "party", "logit_count", "bytes", *extra])
            for e in self.events:
                w.writerow([e.round, e.direction, e.party, e.logit_count, e.bytes, *extra.values()])


def record_round(ledger: CommLedger, round_: int, uplink: Sequence[int] | Mapping[int, int],
                 downlink: Sequence[int] | Mapping[int, int]) -> CommLedger:
    """Append one up and one down event per client and return the ledger."""
    up = dict(uplink) if isinstance(uplink, Mapping) else dict(enumerate(uplink))
    down = dict(downlink) if isinstance(downlink, Mapping) else dict(enumerate(downlink))
    for k in sorted(up):
        ledger.append(round_, "up", k, up[k])
    for k in sorted(down):
        ledger.append(round_, "down", k, down[k])
    return ledger


def comu_at(ledger: CommLedger, metrics: Iterable, target: float, key: str = "server_acc"):
    """Cumulative up+down KB at the first round whose ``key`` accuracy reaches ``target``.

    ``metrics`` rows may be mappings or objects with attributes; accuracies
    and ``target`` are fractions in [0, 1]. Returns None if never reached.
    """
    rows = list(metrics)
    if not rows:
        raise ValueError("metrics must be nonempty")
    for row in rows:
        get = row.get if isinstance(row, Mapping) else lambda k, r=row: getattr(r, k)
        if get(key) >= target:
            up, down = ledger.cumulative_kb_through(get("round"))
            return up + down
    return None
