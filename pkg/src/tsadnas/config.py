"""Run configuration: one INI file of flat ``key = value`` sections, every key defaulted."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import ANOMALY_TYPES, SynthSpec
from .errors import ValidationError
from .nas import SearchBudget
from .pipeline import ScoringConfig
from .training import TrainConfig

# section -> key -> (type, default, help)
SCHEMA: dict[str, dict[str, tuple[type, object, str]]] = {
    "data": {
        "train": (str, "", "train CSV path; empty selects the synthetic generator"),
        "test": (str, "", "test CSV path"),
        "labels": (str, "", "labels CSV path"),
        "eps": (float, 1e-8, "normalization guard"),
        "rolling_window": (int, 0, "append rolling mean/std channels of this width (0 = off)"),
    },
    "synthetic": {
        "train_length": (int, 2000, "T"),
        "test_length": (int, 2000, "T'"),
        "features": (int, 3, "m"),
        "anomaly_types": (str, "spike,level_shift", f"comma list from {ANOMALY_TYPES}"),
        "rate": (float, 0.05, "labeled fraction of the test split"),
        "seed": (int, 7, "generator seed"),
        "noise": (float, 0.05, "noise std"),
        "magnitude": (float, 1.0, "multiplier on spike/level-shift offsets"),
    },
    "training": {
        "epochs": (int, 20, ""),
        "max_train_seconds": (float, 0.0, "0 = unlimited"),
        "val_fraction": (float, 0.0, ""),
        "early_stop_patience": (int, 3, "0 disables"),
        "adv_decay": (float, 0.95, ""),
        "max_iters": (int, 5, "iterative phase inner loop cap"),
        "iter_eps": (float, 1e-5, "iterative convergence threshold"),
        "self_adv_weight": (float, 0.0, ""),
        "clip_norm": (float, 5.0, ""),
        "augment": (bool, True, ""),
        "warp_strength": (float, 0.2, ""),
        "mask_fraction": (float, 0.1, ""),
    },
    "scoring": {
        "q": (float, 0.98, "POT anchor quantile"),
        "coeff": (float, 1e-4, "POT risk"),
        "alpha": (float, 0.1, "mPOT deviation weight"),
        "recent_window": (int, 50, "mPOT trailing window"),
        "mat_window": (int, 50, "MAT N"),
        "mat_kappa": (float, 3.0, "MAT margin"),
        "mode": (str, "mpot", "pot | mpot | mat"),
        "per_dimension": (bool, False, ""),
        "point_adjust": (bool, True, ""),
    },
    "search": {
        "population": (int, 20, ""),
        "generations": (int, 5, ""),
        "per_trial_epochs": (int, 5, ""),
        "per_trial_seconds": (float, 0.0, "0 = unlimited"),
        "p_crossover": (float, 0.9, ""),
        "p_mutation": (float, 0.0, "0 = 1/number of genes"),
        "eval_split": (str, "test", "test | holdout"),
    },
    "run": {
        "seed": (int, 0, "master seed"),
        "out": (str, "out", "output directory"),
        "jobs": (int, 0, "0 = available cores"),
    },
}


def parse_value(kind: type, raw: str, where: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{where}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ValidationError(f"{where}: expected {kind.__name__}, got {raw!r}") from None


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __post_init__(self):
        merged = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
        for s, kv in self.values.items():
            merged[s].update(kv)
        self.values = merged

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ValidationError(f"{source}: {exc}") from None
        problems, values = [], {}
        for section in cp.sections():
            if section not in SCHEMA:
                problems.append(f"unknown section [{section}]")
                continue
            for key, raw in cp.items(section):
                if key not in SCHEMA[section]:
                    problems.append(f"unknown key {section}.{key}")
                    continue
                try:
                    values.setdefault(section, {})[key] = parse_value(
                        SCHEMA[section][key][0], raw, f"{section}.{key}")
                except ValidationError as exc:
                    problems.extend(exc.problems)
        if problems:
            raise ValidationError([f"{source}: {p}" for p in problems])
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file not found: {p}")
        return cls.from_text(p.read_text(encoding="utf-8"), source=str(p))

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ValidationError(f"unknown key {section}.{key}")
        self.values[section][key] = value

    def to_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                v = self.values[section][key]
                lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    # ---- typed views

    def synth_spec(self) -> SynthSpec:
        s = self["synthetic"]
        types = tuple(t.strip() for t in str(s["anomaly_types"]).split(",") if t.strip())
        return SynthSpec(T=s["train_length"], T_test=s["test_length"], m=s["features"],
                         anomaly_types=types, rate=s["rate"], seed=s["seed"], noise=s["noise"],
                         magnitude=s["magnitude"])

    def train_config(self) -> TrainConfig:
        t = dict(self["training"])
        t["max_train_seconds"] = t["max_train_seconds"] or None
        return TrainConfig(seed=self["run"]["seed"], **t)

    def scoring_config(self) -> ScoringConfig:
        return ScoringConfig(**self["scoring"])

    def search_budget(self) -> SearchBudget:
        s = self["search"]
        return SearchBudget(population=s["population"], generations=s["generations"],
                            per_trial_epochs=s["per_trial_epochs"],
                            per_trial_seconds=s["per_trial_seconds"] or None,
                            p_crossover=s["p_crossover"], p_mutation=s["p_mutation"] or None)


def documented_keys() -> list[tuple[str, str, object, str]]:
    return [(s, k, spec[1], spec[2]) for s, keys in SCHEMA.items() for k, spec in keys.items()]

