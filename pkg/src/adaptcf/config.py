"""Run configuration: an INI file with sections, plus ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .bayesopt import BoConfig
from .calib import CALIBRATION_BO_DEFAULTS
from .carfollow import MODELS, ModelKind, SimContext, get_model
from .errors import ConfigError
from .evalharness import EvalConfig
from .grunet import TrainConfig
from .stylescore import BENEFIT, COST, DEFAULT_ORIENTATION
from .trajdata import FIELDS

# every accepted key with its default, as text exactly as it would appear in the file
DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "output_dir": "out", "workers": "1"},
    "data": {"source": "synth", "path": "", "unit_mode": "feet", "column_map": "", "min_frames": "700"},
    "model": {"kind": "krauss", "window_len": "5", "stride": "", "bounds": "", "defaults": "",
              "dt": "0.1", "v_max": "30", "a_max": "2.6", "b_max": "4.5"},
    "bo": {"n_init": "8", "n_iter": "25", "noise_floor": "1e-6",
           "kernel_lengthscale": str(CALIBRATION_BO_DEFAULTS["kernel_lengthscale"]),
           "kernel_variance": "auto", "y_transform": CALIBRATION_BO_DEFAULTS["y_transform"],
           "local_fraction": "0.25"},
    "gru": {"hidden_dim": "32", "epochs": "500", "batch_size": "1", "val_split": "0.1",
            "learning_rate": "1e-3", "gradient_clip": "5.0"},
    "score": {"orientation": ",".join(DEFAULT_ORIENTATION), "cuts": "25,75"},
    "eval": {"train_fraction": "0.8", "pairs": "all", "mode": "pair", "n_folds": "5", "trim": "0.1"},
    "synth": {"corpus": "sinusoid", "n_pairs": "94", "n_frames": "839", "params": "1.0,0.3",
              "period_s": "24"},
}
SOURCES = ("ngsim", "canonical", "synth")
CORPORA = ("style", "constant", "sinusoid")
EVAL_MODES = ("pair", "cluster", "both")


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


@dataclass
class RunConfig:
    raw: dict[str, dict[str, str]]
    seed: int
    output_dir: Path
    workers: int
    source: str
    data_path: Path | None
    unit_mode: str
    column_map: dict[str, str] | None
    min_frames: int
    model: ModelKind
    window_len: int
    stride: int
    ctx: SimContext
    bo: BoConfig
    training: TrainConfig
    hidden_dim: int
    orientation: tuple[str, ...]
    cuts: tuple[float, float]
    train_fraction: float
    pairs: list[tuple[int, int]] | None
    eval_mode: str
    n_folds: int
    trim: float
    synth_corpus: str
    synth_n_pairs: int
    synth_n_frames: int
    synth_params: tuple[float, ...]
    synth_period_s: float
    extra: dict[str, Any] = field(default_factory=dict)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.window_len, self.stride, self.train_fraction, self.bo, self.training,
                          self.hidden_dim, self.ctx, self.seed, self.n_folds, self.trim, self.workers)

    def canonical_text(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    lhs, value = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return section.strip(), key.strip(), value.strip()


def load_raw(path: str | Path | None, overrides: Sequence[str] = ()) -> dict[str, dict[str, str]]:
    raw = {s: dict(v) for s, v in DEFAULTS.items()}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
        for section in parser.sections():
            for key, value in parser.items(section):
                _set(raw, section, key, value)
    for text in overrides:
        _set(raw, *parse_override(text))
    # resolve relative paths against the config file's directory
    for section, key in (("data", "path"), ("run", "output_dir")):
        value = raw[section][key]
        if value and not Path(value).is_absolute():
            raw[section][key] = str((base / value).resolve())
    return raw


def _set(raw, section, key, value):
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    raw[section][key] = value


def _get(raw, section, key, conv, check=None, what=""):
    text = raw[section][key]
    try:
        value = conv(text)
    except (ValueError, TypeError):
        raise ConfigError(f"{section}.{key}: cannot parse {text!r}") from None
    if check is not None and not check(value):
        raise ConfigError(f"{section}.{key} = {text!r}: {what}")
    return value


def _auto_or_float(text: str):
    return "auto" if text.strip() == "auto" else float(text)


def _parse_pairs(text: str) -> list[tuple[int, int]] | None:
    if text.strip() in ("", "all"):
        return None
    out = []
    for item in text.split(","):
        lead, fol = item.strip().split("-")
        out.append((int(lead), int(fol)))
    return out


def build_config(raw: dict[str, dict[str, str]]) -> RunConfig:
    g = lambda s, k, conv, check=None, what="": _get(raw, s, k, conv, check, what)  # noqa: E731
    pos = lambda x: x > 0  # noqa: E731

    source = g("data", "source", str, lambda s: s in SOURCES, f"must be one of {SOURCES}")
    data_path = Path(raw["data"]["path"]) if raw["data"]["path"] else None
    if source in ("ngsim", "canonical") and data_path is None:
        raise ConfigError(f"data.path is required when data.source = {source}")
    column_map = None
    if raw["data"]["column_map"].strip():
        column_map = {}
        for item in raw["data"]["column_map"].split(","):
            name, _, col = item.partition("=")
            if name.strip() not in FIELDS or not col.strip():
                raise ConfigError(f"data.column_map entry {item!r} must be field=Column with field in {FIELDS}")
            column_map[name.strip()] = col.strip()

    kind_name = g("model", "kind", str, lambda s: s in MODELS, f"must be one of {sorted(MODELS)}")
    kind = get_model(kind_name)
    bounds = defaults = None
    if raw["model"]["bounds"].strip():
        vals = _floats(raw["model"]["bounds"], "model.bounds")
        if len(vals) != 2 * kind.n_params:
            raise ConfigError(f"model.bounds needs {kind.n_params} lo,hi pairs")
        bounds = np.array(vals).reshape(-1, 2)
    if raw["model"]["defaults"].strip():
        defaults = _floats(raw["model"]["defaults"], "model.defaults")
        if len(defaults) != kind.n_params:
            raise ConfigError(f"model.defaults needs {kind.n_params} values")
    if bounds is not None or defaults is not None:
        kind = kind.with_bounds(bounds, defaults)
    window_len = g("model", "window_len", int, lambda x: x >= 2, "must be >= 2")
    stride = window_len if not raw["model"]["stride"].strip() else g(
        "model", "stride", int, lambda x: x >= 1, "must be >= 1")
    ctx = SimContext(*(g("model", k, float, pos, "must be positive") for k in ("dt", "v_max", "a_max", "b_max")))

    seed = g("run", "seed", int, lambda x: x >= 0, "must be a non-negative integer")
    try:
        bo = BoConfig(bounds=kind.bounds,
                      n_init=g("bo", "n_init", int), n_iter=g("bo", "n_iter", int), seed=seed,
                      noise_floor=g("bo", "noise_floor", float),
                      kernel_lengthscale=g("bo", "kernel_lengthscale", _auto_or_float),
                      kernel_variance=g("bo", "kernel_variance", _auto_or_float),
                      y_transform=raw["bo"]["y_transform"],
                      local_fraction=g("bo", "local_fraction", float))
        training = TrainConfig(epochs=g("gru", "epochs", int), batch_size=g("gru", "batch_size", int),
                               val_split=g("gru", "val_split", float),
                               learning_rate=g("gru", "learning_rate", float), seed=seed,
                               gradient_clip=g("gru", "gradient_clip", float))
    except ConfigError as exc:
        raise ConfigError(f"[bo]/[gru]: {exc}") from None

    orientation = tuple(x.strip() for x in raw["score"]["orientation"].split(","))
    if len(orientation) != 6 or any(o not in (BENEFIT, COST) for o in orientation):
        raise ConfigError("score.orientation needs six comma-separated benefit/cost tags")
    cuts = tuple(_floats(raw["score"]["cuts"], "score.cuts"))
    if len(cuts) != 2 or not 0 <= cuts[0] <= cuts[1] <= 100:
        raise ConfigError("score.cuts must be two percentiles low,high within [0, 100]")

    try:
        pairs = _parse_pairs(raw["eval"]["pairs"])
    except ValueError:
        raise ConfigError("eval.pairs must be 'all' or a list like 1-11,2-12") from None

    synth_params = tuple(_floats(raw["synth"]["params"], "synth.params"))
    return RunConfig(
        raw=raw, seed=seed,
        output_dir=Path(raw["run"]["output_dir"]),
        workers=g("run", "workers", int, lambda x: x >= 1, "must be >= 1"),
        source=source, data_path=data_path,
        unit_mode=g("data", "unit_mode", str, lambda s: s in ("feet", "meters"), "must be feet or meters"),
        column_map=column_map,
        min_frames=g("data", "min_frames", int, lambda x: x >= 2, "must be >= 2"),
        model=kind, window_len=window_len, stride=stride, ctx=ctx, bo=bo, training=training,
        hidden_dim=g("gru", "hidden_dim", int, lambda x: x >= 1, "must be >= 1"),
        orientation=orientation, cuts=cuts,
        train_fraction=g("eval", "train_fraction", float, lambda x: 0 < x < 1, "must be in (0, 1)"),
        pairs=pairs,
        eval_mode=g("eval", "mode", str, lambda s: s in EVAL_MODES, f"must be one of {EVAL_MODES}"),
        n_folds=g("eval", "n_folds", int, lambda x: x >= 2, "must be >= 2"),
        trim=g("eval", "trim", float, lambda x: 0 <= x < 0.5, "must be in [0, 0.5)"),
        synth_corpus=g("synth", "corpus", str, lambda s: s in CORPORA, f"must be one of {CORPORA}"),
        synth_n_pairs=g("synth", "n_pairs", int, lambda x: x >= 1, "must be >= 1"),
        synth_n_frames=g("synth", "n_frames", int, lambda x: x >= 10, "must be >= 10"),
        synth_params=synth_params,
        synth_period_s=g("synth", "period_s", float, pos, "must be positive"),
    )


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    return build_config(load_raw(path, overrides))
