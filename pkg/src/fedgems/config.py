"""JSON experiment configs: one file fully describes one experiment.

Validation happens before any computation. Errors carry the line of the
offending key so a broken file can be fixed without guesswork.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackSpec
from .data import FederatedData, SplitSpec, build_federated_data, generate_blobs
from .learning import OptimizerConfig
from .protocol import ProtocolConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = f"{path or '<config>'}:{line}: " if line else f"{path or '<config>'}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "blobs"
    class_count: int = 10
    input_dim: int = 16
    samples_per_class: int = 500
    spread: float = 1.9


@dataclass(frozen=True)
class SplitSection:
    public_fraction: float = 0.5
    train_test_ratio: tuple = (5, 1)
    public_label_skew: float = 0.0


@dataclass(frozen=True)
class PartitionSection:
    kind: str = "dirichlet"
    alpha: float = 0.5


@dataclass(frozen=True)
class ModelSection:
    server_hidden_dim: int = 64
    # cycled over client ids; 0 means a linear model
    client_hidden_dims: tuple = (0,)


@dataclass(frozen=True)
class ProtocolSection:
    rounds: int = 20
    mode: str = "fedgems"
    self_train_on: bool = True
    self_distill_on: bool = True
    ensemble_distill_on: bool = True
    local_epochs: int = 1
    batch_size: int = 32


@dataclass(frozen=True)
class AttackSection:
    kind: str = "none"
    epsilon_fraction: typing.Optional[float] = None
    magnitude: float = 100.0
    direction: str = "random"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    client_count: int = 8
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    model: ModelSection = field(default_factory=ModelSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    # extra modes run alongside `run` with the same seed, for side-by-side summaries
    compare_modes: tuple = ()
    # attack-eval averages deltas over seeds seed..seed+paired_seeds-1
    paired_seeds: int = 1
    output_dir: str = "runs/experiment"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def protocol_config(self) -> ProtocolConfig:
        p = self.protocol
        attack = None
        if self.attack.kind != "none":
            attack = AttackSpec(self.attack.kind, self.attack.epsilon_fraction,
                                self.attack.magnitude, self.seed, self.attack.direction)
        return ProtocolConfig(
            rounds=p.rounds, mode=p.mode, self_train_on=p.self_train_on,
            self_distill_on=p.self_distill_on, ensemble_distill_on=p.ensemble_distill_on,
            local_epochs=p.local_epochs, batch_size=p.batch_size, seed=self.seed,
            server_hidden_dim=self.model.server_hidden_dim,
            client_hidden_dims=tuple(self.model.client_hidden_dims),
            optimizer=self.optimizer, attack=attack,
        )

    def build_data(self) -> FederatedData:
        d = self.dataset
        ds = generate_blobs(d.class_count, d.input_dim, d.samples_per_class, d.spread, self.seed)
        split = SplitSpec(self.split.public_fraction, tuple(self.split.train_test_ratio),
                          self.seed, self.split.public_label_skew)
        return build_federated_data(ds, split, self.client_count, self.partition.kind,
                                    self.partition.alpha, self.seed)

    def validate(self) -> None:
        """Raise ``ValueError`` naming the dotted key at fault."""
        checks = [
            ("dataset.kind", self.dataset.kind == "blobs",
             "only 'blobs' is bundled; real image data needs the load_cifar hook"),
            ("dataset.class_count", self.dataset.class_count >= 2, "must be >= 2"),
            ("dataset.input_dim", self.dataset.input_dim >= 1, "must be >= 1"),
            ("dataset.samples_per_class", self.dataset.samples_per_class >= 1, "must be >= 1"),
            ("dataset.spread", self.dataset.spread > 0, "must be positive"),
            ("partition.kind", self.partition.kind in ("iid", "dirichlet"), "must be 'iid' or 'dirichlet'"),
            ("partition.alpha", self.partition.alpha > 0, "must be positive"),
            ("client_count", self.client_count >= 1, "must be >= 1"),
            ("paired_seeds", self.paired_seeds >= 1, "must be >= 1"),
            ("split.train_test_ratio", len(self.split.train_test_ratio) == 2, "must have two entries"),
            ("model.client_hidden_dims", all(h >= 0 for h in self.model.client_hidden_dims)
             and len(self.model.client_hidden_dims) > 0, "must be a nonempty list of ints >= 0"),
        ]
        for mode in self.compare_modes:
            checks.append(("compare_modes", mode in ("fedgems", "fedgem", "standalone"),
                           f"unknown mode {mode!r}"))
        for key, ok, msg in checks:
            if not ok:
                raise _KeyProblem(key, msg)
        for key, build in (("split", lambda: SplitSpec(self.split.public_fraction,
                                                       tuple(self.split.train_test_ratio),
                                                       0, self.split.public_label_skew)),
                           ("protocol", self.protocol_config)):
            try:
                build()
            except ValueError as e:
                raise _KeyProblem(_guess_key(key, str(e), self), str(e)) from None


class _KeyProblem(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(message)


def _guess_key(section: str, message: str, cfg: ExperimentConfig) -> str:
    # map a dataclass validation message back to the key it names
    for prefix, obj in (("protocol", cfg.protocol), ("optimizer", cfg.optimizer),
                        ("attack", cfg.attack), ("model", cfg.model), ("split", cfg.split)):
        for f in dataclasses.fields(obj):
            if re.search(rf"\b{f.name}\b", message):
                return f"{prefix}.{f.name}"
    return section


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# --- parsing ---------------------------------------------------------------


def _key_line(text: str, dotted: str) -> int | None:
    """Line of the last component of ``dotted``, searching each level after its parent."""
    pos = 0
    for part in dotted.split("."):
        m = re.compile(rf'"{re.escape(part)}"\s*:').search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], key)
    if tp is bool:
        if not isinstance(value, bool):
            raise _KeyProblem(key, f"expected true/false, got {json.dumps(value)}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise _KeyProblem(key, f"expected an integer, got {json.dumps(value)}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _KeyProblem(key, f"expected a number, got {json.dumps(value)}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise _KeyProblem(key, f"expected a string, got {json.dumps(value)}")
        return value
    if tp is tuple:
        if not isinstance(value, list):
            raise _KeyProblem(key, f"expected a list, got {json.dumps(value)}")
        return tuple(value)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key)
    raise TypeError(tp)


def _build(cls, data, prefix=""):
    if not isinstance(data, dict):
        raise _KeyProblem(prefix or "<root>", "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise _KeyProblem(f"{prefix}.{k}" if prefix else k,
                              f"unknown key {k!r}; expected one of {sorted(names)}")
    kwargs = {}
    for k, v in data.items():
        dotted = f"{prefix}.{k}" if prefix else k
        kwargs[k] = _coerce(v, hints[k], dotted)
    try:
        return cls(**kwargs)
    except ValueError as e:
        key = next((f"{prefix}.{n}" if prefix else n for n in kwargs
                    if re.search(rf"\b{n}\b", str(e))), prefix or "<root>")
        raise _KeyProblem(key, str(e)) from None


def parse_config(text: str, path: str | None = None) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, e.lineno, path) from None
    try:
        cfg = _build(ExperimentConfig, data)
        cfg.validate()
    except _KeyProblem as e:
        raise ConfigError(f"{e.key}: {e}", _key_line(text, e.key), path) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", None, str(path)) from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=False) + "\n"
