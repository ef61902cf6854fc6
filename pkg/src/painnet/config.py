"""Flat ``section.key = value`` run configuration with validation.

Defaults mirror the published training setup (GRU of 16 units, 16-frame
segments, 1500 episodes with an update every 5, ADAM at 0.005, clipping at 1,
dropout 0.5, validation every 50 episodes on 5 sample sets).
"""

from __future__ import annotations

from pathlib import Path

from .embedding import STAT_OPERATORS
from .features import AU_NAMES
from .relation import COMPARISONS


class ConfigError(ValueError):
    pass


def _int(lo=None):
    def parse(s):
        v = int(s)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        return v
    return parse


def _float(lo=None, hi=None, lo_open=False):
    def parse(s):
        v = float(s)
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return parse


def _choice(*options):
    def parse(s):
        s = str(s).strip()
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


def _list(allowed=None, item=str):
    def parse(s):
        if isinstance(s, (list, tuple)):
            items = [str(x).strip() for x in s]
        else:
            items = [x.strip() for x in str(s).split(",") if x.strip()]
        if not items:
            raise ValueError("empty list")
        if allowed is not None:
            bad = [x for x in items if x not in allowed]
            if bad:
                raise ValueError(f"unknown entries {bad}; allowed: {', '.join(allowed)}")
        if len(set(items)) != len(items):
            raise ValueError("duplicate entries")
        return tuple(item(x) for x in items)
    return parse


def _int_list(s):
    return _list(item=int)(s)


SCHEMA = {
    "seed": (_int(0), 0),
    "au.columns": (_list(AU_NAMES), AU_NAMES),
    "segment.length": (_int(1), 16),
    "gru.hidden": (_int(1), 16),
    "gru2.hidden": (_int(1), 16),
    "stats.operators": (_list(STAT_OPERATORS), ("mean", "std", "lse", "median")),
    "embedding.summarizer": (_choice("stats", "stacked_gru"), "stats"),
    "dropout.p": (_float(0.0, 0.99), 0.5),
    "bn.momentum": (_float(0.0, 1.0), 0.1),
    "bn.eps": (_float(0.0, lo_open=True), 1e-5),
    "relation.comparison": (_choice(*COMPARISONS), "euccos"),
    "train.episodes": (_int(1), 1500),
    "train.accumulate_every": (_int(1), 5),
    "train.lr": (_float(0.0), 0.005),
    "train.clip": (_float(0.0, lo_open=True), 1.0),
    "train.eval_every": (_int(1), 50),
    "train.loss": (_choice("wbce", "bce"), "wbce"),
    "train.mode": (_choice("episode", "batch"), "episode"),
    "train.batch_size": (_int(1), 10),
    "train.batch_size_candidates": (_int_list, ()),
    "train.noise_sigma": (_float(0.0), 0.05),
    "adam.beta1": (_float(0.0, 1.0), 0.9),
    "adam.beta2": (_float(0.0, 1.0), 0.999),
    "adam.eps": (_float(0.0, lo_open=True), 1e-8),
    "eval.sample_sets": (_int(1), 5),
    "eval.icc_variant": (_choice("icc_3_1"), "icc_3_1"),
    "folds.k": (_int(2), 5),
    "folds.val_count": (_int(1), 10),
    "synth.subjects": (_int(1), 25),
    "synth.videos_per_class": (_int(1), 12),
    "synth.min_frames": (_int(1), 64),
    "synth.max_frames": (_int(1), 192),
    "synth.signal_strength": (_float(0.0), 1.0),
    "synth.seed": (_int(0), None),   # unset: synth uses the global seed
}

ALIASES = {
    "training.mode": "train.mode",
    "train.sample_sets": "eval.sample_sets",
    "train.eval_sample_sets": "eval.sample_sets",
}

# keys that accept an empty value, mapped to what it means
_EMPTY_OK = {"train.batch_size_candidates": (), "synth.seed": None}


class Config(dict):
    """Validated mapping of every schema key to its typed value."""

    def __init__(self, overrides: dict | None = None):
        super().__init__({k: default for k, (_, default) in SCHEMA.items()})
        if overrides:
            self.update_from(overrides)

    def update_from(self, overrides: dict) -> "Config":
        for raw_key, raw in overrides.items():
            key = ALIASES.get(raw_key, raw_key)
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {raw_key!r}")
            parse, _ = SCHEMA[key]
            if key in _EMPTY_OK and str(raw).strip() in ("", "()", "None"):
                self[key] = _EMPTY_OK[key]
                continue
            try:
                self[key] = parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid value {raw!r} for {key}: {exc}") from None
        self._check()
        return self

    def _check(self):
        if self["synth.min_frames"] > self["synth.max_frames"]:
            raise ConfigError("synth.min_frames exceeds synth.max_frames")
        if self["eval.sample_sets"] % 2 == 0:
            raise ConfigError("eval.sample_sets must be odd so the median label is an integer")

    def with_overrides(self, **kv) -> "Config":
        c = Config(dict(self))
        return c.update_from({k.replace("__", "."): v for k, v in kv.items()})

    def dumps(self) -> str:
        lines = []
        for key in SCHEMA:
            v = self[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = ""
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def as_meta(self) -> dict[str, str]:
        return {k: v for k, v in (line.split(" = ", 1) for line in self.dumps().splitlines())}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8")))
    values.update(overrides or {})
    return Config(values)
