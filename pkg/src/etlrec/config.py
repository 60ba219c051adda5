"""Run configuration as flat ``key = value`` text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError
from .model import PENALTY_NORMS, PRIOR_KINDS, TRANSFORM_KINDS

ABLATIONS = ("full-etl", "etl-jrl", "aae++")

# "shared": the generator update of the encoders reuses the reconstruction
# optimizer's Adam moments, so eta weighs the prior term against the
# reconstruction loss.  "separate" gives it its own Adam state, which makes
# the step size independent of eta (Adam is scale invariant).
GEN_OPTIMIZERS = ("shared", "separate")

# lambda per benchmark pair, picked on validation from {0.1, 0.5, 1, 2, 5, 10}
BENCHMARK_LAMBDA = {"movie-book": 5.0, "movie-music": 0.5, "music-book": 1.0}


@dataclass
class TrainConfig:
    latent_dim: int = 200
    hidden: int = 400
    disc_hidden: int = 100
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 300
    dropout: float = 0.5
    lam: float = 1.0
    eta: float = 1.0
    prior: str = "gaussian"
    transform: str = "trans5"
    penalty_norm: str = "l1"
    ablation: str = "full-etl"
    disc_steps: int = 1
    gen_optimizer: str = "shared"
    reortho_every: int = 0
    eval_every: int = 1
    cutoffs: tuple = (5, 10)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lam < 0 or self.eta < 0:
            raise ConfigError("lam and eta must be >= 0")
        if self.batch_size < 1 or self.latent_dim < 1 or self.hidden < 1 or self.disc_hidden < 1:
            raise ConfigError("batch_size and layer widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.epochs < 0 or self.disc_steps < 0 or self.eval_every < 1 or self.reortho_every < 0:
            raise ConfigError("epochs/disc_steps/reortho_every must be >= 0 and eval_every >= 1")
        if self.prior not in PRIOR_KINDS:
            raise ConfigError(f"prior must be one of {PRIOR_KINDS}")
        if self.transform not in TRANSFORM_KINDS:
            raise ConfigError(f"transform must be one of {TRANSFORM_KINDS}")
        if self.penalty_norm not in PENALTY_NORMS:
            raise ConfigError(f"penalty_norm must be one of {PENALTY_NORMS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.gen_optimizer not in GEN_OPTIMIZERS:
            raise ConfigError(f"gen_optimizer must be one of {GEN_OPTIMIZERS}")
        if not self.cutoffs or any(int(k) < 1 for k in self.cutoffs):
            raise ConfigError("cutoffs must be positive integers")
        self.cutoffs = tuple(int(k) for k in self.cutoffs)

    def model_fields(self, n_items_a: int, n_items_b: int) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "hidden": self.hidden,
            "disc_hidden": self.disc_hidden,
            "transform": self.transform,
            "n_items_a": n_items_a,
            "n_items_b": n_items_b,
        }

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class RunConfig(TrainConfig):
    dataset: str = ""
    run_dir: str = "run"
    train_ratio: float = 1.0
    uncut_mrr: bool = False

    def validate(self):
        super().validate()
        if not 0.0 < self.train_ratio <= 1.0:
            raise ConfigError("train_ratio must be in (0, 1]")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def parse_config(text: str, cls=RunConfig, overrides: dict[str, str] | None = None):
    """Parse ``key = value`` lines (``#`` comments allowed); unknown keys are rejected."""
    known = {f.name: f for f in fields(cls)}
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    raw.update(overrides or {})
    values = {}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = _coerce(k, v, known[k].default)
    return cls(**values)


def load_config(path, cls=RunConfig, overrides: dict[str, str] | None = None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), cls, overrides)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
