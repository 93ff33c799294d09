"""Sectioned key-value configuration with validation, presets and env overrides."""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from importlib import resources
from pathlib import Path

from .errors import ConfigInvalid

ENV_PREFIX = "MOTIONLM_"

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _bool(s: str) -> bool:
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {s!r}") from None


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


def _tasks(s: str) -> tuple[str, ...]:
    items = tuple(t.strip() for t in s.split(",") if t.strip())
    bad = [t for t in items if t not in ("tracking", "understanding", "m2t", "t2m")]
    if bad or not items:
        raise ValueError(f"bad task list {s!r}")
    return items


def _kind(s: str) -> str:
    if s not in ("three_points", "one_point"):
        raise ValueError(f"sensor kind must be three_points or one_point, got {s!r}")
    return s


pos = lambda x: x > 0
nonneg = lambda x: x >= 0
unit = lambda x: 0 < x < 1

# section -> key -> (parser, check)
SCHEMA: dict[str, dict[str, tuple]] = {
    "paths": {"skeleton": (str, None), "corpus": (str, None), "work": (str, None)},
    "corpus": {"n_train": (int, pos), "n_test": (int, pos), "duration": (int, pos), "fps": (float, pos),
               "video_dim": (int, pos), "sensor_kind": (_kind, None)},
    "tokenizer": {"n_codebooks": (int, pos), "codebook_size": (int, pos), "code_dim": (int, pos),
                  "down_rate": (int, pos), "width": (int, pos), "decay": (float, unit),
                  "reset_threshold": (float, nonneg), "reset_every": (int, nonneg),
                  "lambda_commit": (float, nonneg), "lambda_recon": (float, nonneg), "lambda_raw": (float, nonneg),
                  "lambda_joints": (float, nonneg), "lambda_vel": (float, nonneg),
                  "smooth_l1_beta": (float, pos)},
    "lm": {"layers": (int, pos), "heads": (int, pos), "d_model": (int, pos), "max_len": (int, pos),
           "text_vocab": (int, lambda x: x >= 256), "freeze_text": (_bool, None), "sensor_width": (int, pos)},
    "train": {"seed": (int, nonneg), "beta1": (float, unit), "beta2": (float, unit),
              "vq_steps": (int, nonneg), "vq_batch": (int, pos), "vq_lr": (float, pos),
              "pre_steps": (int, nonneg), "pre_batch": (int, pos), "pre_lr": (float, pos),
              "ins_steps": (int, nonneg), "ins_batch": (int, pos), "ins_lr": (float, pos),
              "tasks": (_tasks, None), "use_video": (_bool, None)},
    "inference": {"window": (int, pos), "temperature": (float, pos), "top_k": (_opt_int, None)},
}

# Sections that define model shapes; a checkpoint only resumes under the same values.
FINGERPRINT_SECTIONS = ("tokenizer", "lm", "corpus")


def _parse_file(text: str, source: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigInvalid(f"{source}: {exc}") from exc
    return {s: dict(cp[s]) for s in cp.sections()}


def preset_text(name: str) -> str:
    try:
        return resources.files("motionlm.data").joinpath(f"{name}.ini").read_text()
    except FileNotFoundError:
        raise ConfigInvalid(f"unknown preset {name!r}") from None


class Config:
    """Typed view of the sections in :data:`SCHEMA`; access as ``cfg.section.key``."""

    def __init__(self, values: dict[str, dict]):
        self.values = values

    def __getattr__(self, section):
        try:
            return _Section(self.values[section])
        except KeyError:
            raise AttributeError(section) from None

    def get(self, section: str, key: str):
        return self.values[section][key]

    def to_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
                for s, kv in self.values.items()}

    def fingerprint(self) -> str:
        d = self.to_dict()
        blob = json.dumps({s: d[s] for s in FINGERPRINT_SECTIONS}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for s, kv in self.to_dict().items():
            lines.append(f"[{s}]")
            for k, v in kv.items():
                if isinstance(v, list):
                    v = ",".join(v)
                lines.append(f"{k} = {'' if v is None else v}")
            lines.append("")
        return "\n".join(lines)


class _Section:
    def __init__(self, d):
        self._d = d

    def __getattr__(self, k):
        try:
            return self._d[k]
        except KeyError:
            raise AttributeError(k) from None


def _apply(raw: dict, layer: dict, source: str):
    for section, kv in layer.items():
        if section not in SCHEMA:
            raise ConfigInvalid(f"{source}: unknown section [{section}]")
        for k, v in kv.items():
            if k not in SCHEMA[section]:
                raise ConfigInvalid(f"{source}: unknown key {section}.{k}")
            raw[section][k] = str(v)


def env_overrides(env) -> dict[str, dict[str, str]]:
    """``MOTIONLM_<SECTION>_<KEY>=value`` (case-insensitive section and key)."""
    out: dict[str, dict[str, str]] = {}
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        for section in SCHEMA:
            if rest.startswith(section + "_"):
                out.setdefault(section, {})[rest[len(section) + 1:]] = value
                break
        else:
            raise ConfigInvalid(f"environment variable {name} names no config section")
    return out


def load_config(path=None, preset: str = "canonical", env=None, overrides: dict | None = None) -> Config:
    """Layers: the canonical preset, a named preset, the file, environment, explicit overrides."""
    raw: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}
    _apply(raw, _parse_file(preset_text("canonical"), "canonical"), "canonical")
    if preset != "canonical":
        _apply(raw, _parse_file(preset_text(preset), preset), preset)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        _apply(raw, _parse_file(text, str(path)), str(path))
    _apply(raw, env_overrides(os.environ if env is None else env), "environment")
    if overrides:
        _apply(raw, overrides, "overrides")
    return validate(raw)


def validate(raw: dict[str, dict[str, str]]) -> Config:
    values: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for k, (parse, check) in keys.items():
            if k not in raw.get(section, {}):
                raise ConfigInvalid(f"missing key {section}.{k}")
            s = raw[section][k]
            try:
                v = parse(s)
            except ValueError as exc:
                raise ConfigInvalid(f"{section}.{k}: {exc}") from exc
            if check is not None and v is not None and not check(v):
                raise ConfigInvalid(f"{section}.{k}={s} out of range")
            values[section][k] = v
    t, lm, c, inf = values["tokenizer"], values["lm"], values["corpus"], values["inference"]
    r = t["down_rate"]
    if r & (r - 1):
        raise ConfigInvalid("tokenizer.down_rate must be a power of two")
    if lm["d_model"] % lm["heads"]:
        raise ConfigInvalid("lm.d_model must be divisible by lm.heads")
    if c["duration"] % r:
        raise ConfigInvalid("corpus.duration must be divisible by tokenizer.down_rate")
    if inf["window"] % r:
        raise ConfigInvalid("inference.window must be divisible by tokenizer.down_rate")
    if inf["window"] > c["duration"]:
        raise ConfigInvalid("inference.window longer than corpus clips")
    if inf["top_k"] is not None and inf["top_k"] < 1:
        raise ConfigInvalid("inference.top_k must be positive")
    if r * 2 > inf["window"]:
        raise ConfigInvalid("window must cover at least two token groups")
    return Config(values)
