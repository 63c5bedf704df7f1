"""Run configuration: one tree of dataclasses, loadable from YAML/JSON, with
flat ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .attention import AttentionConfig, DecoderScheme
from .embedding import RADIUS_WAYMO
from .model import ENCODERS, VARIANTS, ModelConfig


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        self.key = key
        super().__init__(f"{key}: {msg}")


def _doc(default, help: str, **kw):
    return field(default=default, metadata={"help": help}, **kw)


def _docf(factory, help: str):
    return field(default_factory=factory, metadata={"help": help})


@dataclass
class ModelSection:
    variant: str = _doc("ct3dpp", "model variant: ct3d | ct3dpp")
    decoder: str = _doc("extended", "decoder scheme: standard | channelwise | extended")
    encoder: str = _doc("", "encoder override: self_attention | pbc | mlp (empty = variant default)")
    use_bev: bool = _doc(True, "feed BEV features to the fusion embedding (ct3dpp)")
    decode_from: str = _doc("points", "decode from raw points or keypoints (pbc only)")
    canonical: bool = _doc(False, "rotate keypoint offsets into the proposal frame")


@dataclass
class AttnSection:
    d_model: int = _doc(32, "feature width D [channels]")
    n_heads: int = _doc(4, "attention heads [count]")
    n_layers: int = _doc(3, "encoder layers [count]")
    ffn_expansion: int = _doc(2, "FFN hidden width as a multiple of D [ratio]")
    pbc_axes: str = _doc("source", "PBC softmax axes: source | literal")


@dataclass
class SamplingSection:
    strategy: str = _doc("", "object | category (empty = variant default)")
    n_points: int = _doc(64, "points sampled per proposal N [count]")
    alpha: float = _doc(1.2, "object-based RoI radius scale [unitless]")
    radius_table: dict = _docf(lambda: dict(RADIUS_WAYMO), "category sampling radii [m]")


@dataclass
class SceneSection:
    n_train: int = _doc(2000, "training scenes [count]")
    n_eval: int = _doc(200, "evaluation scenes [count]")
    n_objects: int = _doc(4, "objects per scene [count]")
    density: float = _doc(20.0, "visible-surface point density at reference range [points/m^2]")
    range_falloff: bool = _doc(True, "inverse-square density falloff beyond reference range")
    reference_range: float = _doc(20.0, "range where falloff starts [m]")
    noise_sigma: float = _doc(0.02, "surface noise along the normal [m]")
    clutter_ratio: float = _doc(0.3, "clutter points per object point [ratio]")


@dataclass
class RpnSection:
    sigma_center: float = _doc(0.3, "proposal center noise per axis [m]")
    sigma_size: float = _doc(0.05, "proposal size noise [log-ratio]")
    sigma_yaw: float = _doc(0.05, "proposal heading noise [rad]")
    fp_rate: float = _doc(0.25, "false positives per ground truth [ratio]")
    bev_cell_size: float = _doc(0.4, "BEV cell size [m]")
    train_repeats: int = _doc(2, "independent proposal draws per training scene [count]")


@dataclass
class TrainSection:
    steps: int = _doc(2000, "optimizer steps [count]")
    batch: int = _doc(32, "proposals per step M-hat, half foreground [count]")
    lr: float = _doc(0.0, "learning rate (0 = variant default: ct3d 1e-3, ct3dpp 5e-4)")
    eval_every: int = _doc(500, "steps between metric rows [count]")
    grad_clip: float = _doc(5.0, "global gradient-norm clip (0 = off)")
    reg_weight: float = _doc(1.0, "weight of the regression loss [unitless]")
    cosine: bool = _doc(True, "cosine learning-rate decay to zero")


@dataclass
class EvalSection:
    score_threshold: float = _doc(0.1, "minimum score for a detection to count toward recall [0-1]")


@dataclass
class BenchSection:
    n_values: list = _docf(lambda: [64, 128, 256, 512, 1024], "point counts N to time [count]")
    d_model: int = _doc(32, "feature width for the scaling sweep [channels]")
    n_layers: int = _doc(3, "encoder layers [count]")
    batch: int = _doc(16, "proposals per timed call [count]")
    reps: int = _doc(20, "timed repetitions [count]")
    warmup: int = _doc(3, "untimed warmup calls [count]")


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    attn: AttnSection = field(default_factory=AttnSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    scene: SceneSection = field(default_factory=SceneSection)
    rpn: RpnSection = field(default_factory=RpnSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    seed: int = _doc(0, "master seed")
    scenes_dir: str = _doc("", "directory of generated scenes (train/ and eval/)")
    checkpoint: str = _doc("", "checkpoint path for eval")

    # -- derived ---------------------------------------------------------
    def model_config(self) -> ModelConfig:
        a = self.attn
        return ModelConfig(
            variant=self.model.variant,
            attn=AttentionConfig(a.d_model, a.n_heads, a.n_layers, a.ffn_expansion, a.pbc_axes),
            decoder=self.model.decoder,
            encoder=self.model.encoder,
            use_bev=self.model.use_bev,
            decode_from=self.model.decode_from,
            canonical=self.model.canonical,
        )

    @property
    def sampling_strategy(self) -> str:
        if self.sampling.strategy:
            return self.sampling.strategy
        return "object" if self.model.variant == "ct3d" else "category"

    @property
    def learning_rate(self) -> float:
        if self.train.lr > 0:
            return self.train.lr
        return 1e-3 if self.model.variant == "ct3d" else 5e-4

    def validate(self) -> "RunConfig":
        checks = [
            ("model.variant", self.model.variant in VARIANTS, f"expected one of {VARIANTS}"),
            ("model.decoder", self.model.decoder in [s.value for s in DecoderScheme], "unknown scheme"),
            ("model.encoder", self.model.encoder in ("",) + ENCODERS, f"expected one of {ENCODERS}"),
            ("sampling.strategy", self.sampling.strategy in ("", "object", "category"), "object | category"),
            ("sampling.n_points", self.sampling.n_points >= 1, "must be >= 1"),
            ("sampling.alpha", self.sampling.alpha > 0, "must be > 0"),
            ("train.batch", self.train.batch >= 2 and self.train.batch % 2 == 0, "must be even and >= 2"),
            ("train.steps", self.train.steps >= 1, "must be >= 1"),
            ("train.eval_every", self.train.eval_every >= 1, "must be >= 1"),
            ("scene.n_train", self.scene.n_train >= 1, "must be >= 1"),
            ("scene.n_eval", self.scene.n_eval >= 1, "must be >= 1"),
            ("rpn.train_repeats", self.rpn.train_repeats >= 1, "must be >= 1"),
            ("eval.score_threshold", 0.0 <= self.eval.score_threshold <= 1.0, "must be in [0, 1]"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None
        return self

    # -- io --------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for key, value in flatten(data).items():
            set_key(cfg, key, value)
        return cfg.validate()

    @classmethod
    def load(cls, path, overrides: list[str] = ()) -> "RunConfig":
        data = {}
        if path:
            text = Path(path).read_text()
            data = yaml.safe_load(text) or {}
            if not isinstance(data, dict):
                raise ConfigError(str(path), "config file must hold a mapping")
        cfg = cls()
        for key, value in flatten(data).items():
            set_key(cfg, key, value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(item, "override must look like key=value")
            key, raw = item.split("=", 1)
            set_key(cfg, key.strip(), yaml.safe_load(raw))
        return cfg.validate()


_DICT_KEYS = {"sampling.radius_table"}


def flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in _DICT_KEYS:
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def set_key(cfg: RunConfig, key: str, value: Any):
    parts = key.split(".")
    obj = cfg
    for i, part in enumerate(parts):
        names = {f.name: f for f in fields(obj)}
        if part not in names:
            raise ConfigError(key, "unknown config key")
        if i == len(parts) - 1:
            setattr(obj, part, _coerce(key, names[part], getattr(obj, part), value))
            return
        obj = getattr(obj, part)
        if not dataclasses.is_dataclass(obj):
            raise ConfigError(key, "unknown config key")
    raise ConfigError(key, "unknown config key")


def _coerce(key: str, f, current, value):
    if dataclasses.is_dataclass(current):
        raise ConfigError(key, "is a section, not a value")
    want = type(current)
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if want is str and isinstance(value, str):
        return value
    if want is str and value is None:
        return ""
    if want is list and isinstance(value, list):
        return value
    if want is dict and isinstance(value, dict):
        return value
    raise ConfigError(key, f"expected {want.__name__}, got {value!r}")


def key_table() -> list[tuple[str, str, str]]:
    """``(dotted key, default, help)`` for every leaf key."""
    rows = []

    def walk(obj, prefix):
        for f in fields(obj):
            val = getattr(obj, f.name)
            if dataclasses.is_dataclass(val):
                walk(val, f"{prefix}{f.name}.")
            else:
                rows.append((f"{prefix}{f.name}", json.dumps(val), f.metadata.get("help", "")))

    walk(RunConfig(), "")
    return rows
