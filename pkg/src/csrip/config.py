"""Experiment configuration: a flat key/value YAML document with env overrides.

Any key can be overridden through an environment variable named
``CSRIP_<KEY>`` (upper case), e.g. ``CSRIP_SR_MAX_EPOCHS=3``. Values are
parsed as YAML scalars/lists.
"""
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .checkpoint import config_hash
from .network import NetworkConfig
from .training import ABLATION_ROWS, Schedule

ENV_PREFIX = "CSRIP_"
# keys that never influence results
UNHASHED = ("output_dir",)


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    data_root: str = "data"
    train_manifest: str = "train.txt"
    test_manifest: str = "test.txt"
    output_dir: str = "runs/desk"
    train_ratio: float = 0.9
    data_seed: int = 0

    width: int = 512
    blocks_per_module: int = 3
    width_multiplier: float = 1 / 16
    lrelu_slope: float = 0.2

    prior_width_multiplier: float = 0.25
    prior_batch_size: int = 32
    prior_lr: float = 1e-3
    prior_decay_every: int = 20
    prior_max_epochs: int = 50
    prior_patience: int = 10

    sr_batch_size: int = 8
    sr_lr: float = 10.0 / 3.0 * 1e-3
    sr_milestones: list = field(default_factory=lambda: [10, 25, 50, 80])
    sr_max_epochs: int = 100
    sr_patience: int = 10
    sr_train_limit: int = 0  # cap on stage-2 training images (0 = all)

    loss_row: str = "C-SRIP"
    alpha: float = 0.001
    seed: int = 0
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])

    @classmethod
    def paper(cls):
        return cls(profile="paper", output_dir="runs/paper", blocks_per_module=7,
                   width_multiplier=1.0, prior_width_multiplier=1.0, prior_batch_size=128,
                   prior_lr=1e-4, prior_max_epochs=100)

    @classmethod
    def desk(cls):
        return cls()

    def validate(self):
        if self.loss_row not in ABLATION_ROWS:
            raise ValueError(f"loss_row must be one of {list(ABLATION_ROWS)}, got {self.loss_row!r}")
        if not 0 < self.train_ratio < 1:
            raise ValueError("train_ratio must lie in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.network().validate()
        return self

    def network(self, cascaded=True):
        return NetworkConfig(width=self.width, blocks_per_module=self.blocks_per_module,
                             width_multiplier=self.width_multiplier,
                             lrelu_slope=self.lrelu_slope, cascaded=cascaded)

    def prior_schedule(self):
        return Schedule(batch_size=self.prior_batch_size, initial_lr=self.prior_lr,
                        decay_every=self.prior_decay_every, max_epochs=self.prior_max_epochs,
                        patience=self.prior_patience)

    def sr_schedule(self):
        """Stage-2 schedule; milestones are given for a 100-epoch budget and rescaled."""
        base = Schedule(batch_size=self.sr_batch_size, initial_lr=self.sr_lr,
                        milestones=tuple(self.sr_milestones), max_epochs=100,
                        patience=self.sr_patience)
        return base.with_max_epochs(self.sr_max_epochs)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        d = {k: v for k, v in self.to_dict().items() if k not in UNHASHED}
        return config_hash(d)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def resolve(self, key):
        """Path-valued keys resolved against the data root."""
        p = Path(getattr(self, key))
        if key in ("train_manifest", "test_manifest") and not p.is_absolute():
            p = Path(self.data_root) / p
        return p


PROFILES = {"desk": ExperimentConfig.desk, "paper": ExperimentConfig.paper}


def _coerce(name, value, kind):
    if kind in (list, "list"):
        if isinstance(value, (int, float)):
            return [value]
        if not isinstance(value, list):
            raise ValueError(f"{name}: expected a list, got {value!r}")
        return value
    if kind in (bool, "bool"):
        return bool(value)
    if kind in (int, "int"):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return str(value)


def load_config(path=None, profile=None, overrides=None, environ=None):
    """Profile defaults <- config file <- environment <- explicit overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: expected a key/value mapping")
        values.update(loaded)
    profile = profile or values.pop("profile", None) or "desk"
    values.pop("profile", None)
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {list(PROFILES)}")
    cfg = PROFILES[profile]()
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    environ = os.environ if environ is None else environ
    for key in kinds:
        env = environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            values[key] = yaml.safe_load(env)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(kinds))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    for key, value in values.items():
        setattr(cfg, key, _coerce(key, value, kinds[key]))
    return cfg.validate()
