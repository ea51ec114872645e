"""Search-space genome: every architectural and training hyperparameter of a candidate."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Gene:
    name: str
    kind: str  # "float", "int", "bool", "choice"
    low: float | None = None
    high: float | None = None
    step: int = 1
    log: bool = False
    choices: tuple = ()

    def describe(self) -> str:
        if self.kind in ("float", "int"):
            extra = " log" if self.log else (f" step {self.step}" if self.step > 1 else "")
            return f"[{self.low}, {self.high}]{extra}"
        if self.kind == "bool":
            return "{True, False}"
        return "{" + ", ".join(self.choices) + "}"

    def sample(self, rng: np.random.Generator):
        if self.kind == "bool":
            return bool(rng.integers(0, 2))
        if self.kind == "choice":
            return self.choices[int(rng.integers(0, len(self.choices)))]
        if self.kind == "float":
            if self.log:
                return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
            return float(rng.uniform(self.low, self.high))
        if self.log:
            # log-uniform over the widened interval, then round (each integer gets its log-width)
            v = math.exp(rng.uniform(math.log(self.low - 0.5), math.log(self.high + 0.5)))
            return int(min(max(round(v), self.low), self.high))
        n = (int(self.high) - int(self.low)) // self.step
        return int(self.low) + self.step * int(rng.integers(0, n + 1))

    def check(self, value) -> str | None:
        bad = f"{self.name}={value!r} outside {self.describe()}"
        if self.kind == "bool":
            return None if isinstance(value, bool) else bad
        if self.kind == "choice":
            return None if value in self.choices else bad
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return bad
        if self.kind == "int" and not float(value).is_integer():
            return bad
        if not (self.low <= value <= self.high) or not math.isfinite(value):
            return bad
        if self.kind == "int" and (int(value) - int(self.low)) % self.step:
            return bad
        return None


GENES: tuple[Gene, ...] = (
    Gene("learning_rate", "float", 1e-5, 1e-1, log=True),
    Gene("dropout", "float", 0.1, 0.5),
    Gene("batch_size", "int", 16, 128, step=16),
    Gene("gaussian_noise", "float", 1e-4, 1e-1, log=True),
    Gene("time_warping", "bool"),
    Gene("time_masking", "bool"),
    Gene("window_size", "int", 10, 30),
    Gene("pos_encoding", "choice", choices=("sinusoidal", "fourier")),
    Gene("dim_feedforward", "int", 8, 128, log=True),
    Gene("encoder_layers", "int", 1, 3),
    Gene("decoder_layers", "int", 1, 3),
    Gene("activation", "choice", choices=("relu", "leaky_relu", "sigmoid", "tanh")),
    Gene("attention", "choice", choices=("scaled_dot_product",)),
    Gene("use_linear_embedding", "bool"),
    Gene("norm_type", "choice", choices=("layer", "batch", "instance")),
    Gene("self_conditioning", "bool"),
    Gene("ffn_layers", "int", 1, 3),
    Gene("phase_type", "choice", choices=("1phase", "2phase", "iterative")),
)
GENE_BY_NAME = {g.name: g for g in GENES}


@dataclass(frozen=True)
class Genome:
    learning_rate: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 32
    gaussian_noise: float = 1e-4
    time_warping: bool = False
    time_masking: bool = False
    window_size: int = 10
    pos_encoding: str = "sinusoidal"
    dim_feedforward: int = 16
    encoder_layers: int = 1
    decoder_layers: int = 1
    activation: str = "relu"
    attention: str = "scaled_dot_product"
    # None means "bind to the feature count at build time"
    n_heads: int | None = None
    use_linear_embedding: bool = True
    norm_type: str = "layer"
    self_conditioning: bool = False
    ffn_layers: int = 1
    phase_type: str = "2phase"

    def problems(self, n_features: int | None = None) -> list[str]:
        out = [p for g in GENES if (p := g.check(getattr(self, g.name))) is not None]
        h = self.n_heads
        if h is not None and (isinstance(h, bool) or not isinstance(h, int) or h < 1):
            out.append(f"n_heads={h!r} must be a positive integer")
        elif n_features is not None and h is not None and h != n_features:
            out.append(f"n_heads={h} must equal the feature dimension {n_features}")
        return out

    def validate(self, n_features: int | None = None) -> "Genome":
        problems = self.problems(n_features)
        if problems:
            raise ValidationError(problems)
        return self

    def bind(self, n_features: int) -> "Genome":
        """Return a copy with ``n_heads`` pinned to ``n_features``."""
        return self.with_(n_heads=n_features).validate(n_features)

    def with_(self, **changes) -> "Genome":
        d = asdict(self)
        d.update(changes)
        return Genome(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Genome":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValidationError([f"unknown genome key {k!r}" for k in unknown])
        parsed = {k: _coerce(k, v) for k, v in d.items()}
        return cls(**parsed).validate()

    @classmethod
    def from_json(cls, text: str) -> "Genome":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"genome is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ValidationError("genome JSON must be an object")
        return cls.from_dict(d)


def _coerce(name: str, value):
    if name == "n_heads":
        if value is None:
            return None
        return int(value) if isinstance(value, (int, float)) and float(value).is_integer() else value
    gene = GENE_BY_NAME[name]
    if gene.kind == "bool" and isinstance(value, str):
        low = value.strip().lower()
        if low in ("true", "false"):
            return low == "true"
    if gene.kind == "choice" and isinstance(value, str):
        return value.strip().lower()
    if gene.kind == "int" and isinstance(value, float) and value.is_integer():
        return int(value)
    if gene.kind == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def sample_genome(rng: np.random.Generator, n_features: int | None = None) -> Genome:
    values = {g.name: g.sample(rng) for g in GENES}
    return Genome(n_heads=n_features, **values)
