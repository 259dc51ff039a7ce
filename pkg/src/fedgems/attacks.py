"""Model-poisoning adversaries acting on client logit reports.

All row functions take ``benign`` with the client axis first, i.e. shape
``(n, ..., C)``, so they work on one sample or a whole batch of samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

KINDS = ("none", "PAF", "LIE", "OFOM")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    # fraction of poisoned clients; None -> (#victims per round) / K
    epsilon_fraction: float | None = None
    magnitude: float = 100.0
    seed: int = 0
    # "random": a unit direction drawn once from the seed; "ones": normalised
    # all-ones, which softmax cannot see
    direction: str = "random"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.epsilon_fraction is not None and not 0 <= self.epsilon_fraction < 1:
            raise ValueError("epsilon_fraction must lie in [0, 1)")
        if not self.magnitude > 0:
            raise ValueError("magnitude must be positive")
        if self.direction not in ("random", "ones"):
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def victims_per_round(self) -> int:
        return {"none": 0, "PAF": 1, "LIE": 1, "OFOM": 2}[self.kind]


# Acklam's rational approximation to the standard normal quantile
# (relative error 1.15e-9), followed by one Halley step against erfc.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def inverse_normal_cdf(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile {p} outside (0, 1)")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def paf(benign, epsilon_fraction: float, shift) -> np.ndarray:
    """Scaled benign sum plus a large shift vector."""
    benign = np.asarray(benign, dtype=np.float64)
    n = benign.shape[0]
    denom = (1.0 - epsilon_fraction) * n
    if n < 1 or not denom > 0:
        raise ValueError("degenerate PAF denominator")
    return benign.sum(axis=0) / denom + np.asarray(shift, dtype=np.float64)


def lie_parameters(n: int, epsilon_fraction: float) -> tuple[int, float]:
    """Majority size ``s`` and the z-score used by the LIE attack."""
    if n < 2:
        raise ValueError("LIE needs n >= 2")
    poisoned = epsilon_fraction * n
    if abs(poisoned - round(poisoned)) > 1e-9 or round(poisoned) < 1:
        raise ValueError(f"epsilon_fraction * n = {poisoned} is not a positive integer")
    s = math.floor(n / 2 + 1) - int(round(poisoned))
    quantile = (n - s) / n
    if not 0 < quantile < 1:
        raise ValueError(f"(n - s) / n = {quantile} outside (0, 1)")
    return s, inverse_normal_cdf(quantile)


def lie(benign, n: int, epsilon_fraction: float) -> np.ndarray:
    """Per-dimension mean plus z_max standard deviations of the benign rows."""
    benign = np.asarray(benign, dtype=np.float64)
    _, z = lie_parameters(n, epsilon_fraction)
    return benign.mean(axis=0) + z * benign.std(axis=0)


def ofom(benign, shift) -> tuple[np.ndarray, np.ndarray]:
    benign = np.asarray(benign, dtype=np.float64)
    n = benign.shape[0]
    if n < 1:
        raise ValueError("OFOM needs at least one benign row")
    total = benign.sum(axis=0)
    far = total / n + np.asarray(shift, dtype=np.float64)
    return far, (total + far) / (n + 1)


def attack_shift(spec: AttackSpec, class_count: int) -> np.ndarray:
    if spec.direction == "ones":
        u = np.ones(class_count)
    else:
        u = np.random.default_rng([spec.seed, 101]).standard_normal(class_count)
    return spec.magnitude * u / np.linalg.norm(u)


def victims(spec: AttackSpec, round_: int, client_count: int) -> list[int]:
    """Poisoned client ids this round: consecutive ids starting at (round + seed) mod K."""
    m = spec.victims_per_round
    if m > client_count - 1:
        raise ValueError(f"{spec.kind} needs at least {m + 1} clients, got {client_count}")
    start = (round_ + spec.seed) % client_count
    return sorted((start + i) % client_count for i in range(m))


def apply_attack(reports, spec: AttackSpec | None, round_: int):
    """Replace the designated clients' logits; other reports are returned untouched.

    ``reports`` is a client-id-ordered sequence of objects with ``client_id``
    and ``logits`` (rows aligned on the same sample indices).
    Returns ``(reports, victim_ids)``.
    """
    reports = list(reports)
    if spec is None or spec.kind == "none" or not reports:
        return reports, []
    K = len(reports)
    bad = victims(spec, round_, K)
    bad_set = set(bad)
    benign = np.stack([r.logits for r in reports if r.client_id not in bad_set])
    eps = spec.epsilon_fraction if spec.epsilon_fraction is not None else len(bad) / K
    C = benign.shape[-1]
    out = list(reports)
    pos = {r.client_id: i for i, r in enumerate(reports)}
    if spec.kind == "PAF":
        rows = [paf(benign, eps, attack_shift(spec, C))]
    elif spec.kind == "LIE":
        rows = [lie(benign, K, eps)]
    else:
        rows = list(ofom(benign, attack_shift(spec, C)))
    for cid, row in zip(bad, rows):
        i = pos[cid]
        out[i] = replace(reports[i], logits=row)
    return out, bad
