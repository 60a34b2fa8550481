"""Experiment configuration: defaults, JSON file, flag overrides, environment."""

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import get_type_hints

from dotenv import load_dotenv

from .errors import ConfigError
from .network import BACKBONE_KINDS, TrainHyper
from .tensor import INITS

CV_MODES = ("loocv", "kfold")
PRECISIONS = ("float32", "float64")


@dataclass
class DatasetConfig:
    data_dir: str = None


@dataclass
class SynthConfig:
    n_subjects_per_group: int = 20
    n_images: int = 30
    image_width: int = 200
    image_height: int = 150
    n_objects: int = 3
    object_radius_px: float = 12.0
    fixations_per_image: int = 12
    samples_per_fixation: int = 30
    gaze_jitter_px: float = 3.0
    center_bias_td: float = 0.05
    center_bias_asd: float = 0.6
    center_sigma_px: float = 8.0
    signal_images: list = None

    def __post_init__(self):
        if self.n_subjects_per_group < 1 or self.n_images < 1:
            raise ConfigError("synth.n_subjects_per_group and synth.n_images must be >= 1")
        if self.image_width < 2 or self.image_height < 2:
            raise ConfigError("synth image dimensions must be >= 2")
        if self.signal_images is not None and any(
            not 0 <= j < self.n_images for j in self.signal_images
        ):
            raise ConfigError("synth.signal_images must index existing images")


@dataclass
class HfmConfig:
    sample_rate_hz: float = 300.0
    sigma_px: float = 24.0
    resize: int = 256
    crop: int = 224

    def __post_init__(self):
        if self.sample_rate_hz <= 0 or self.sigma_px <= 0:
            raise ConfigError("hfm.sample_rate_hz and hfm.sigma_px must be positive")
        if not 0 < self.crop <= self.resize:
            raise ConfigError("hfm.crop must be in (0, hfm.resize]")


@dataclass
class BackboneSection:
    kind: str = "tiny"
    feature_dim: int = 64
    weights_path: str = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"backbone.kind must be one of {BACKBONE_KINDS}")
        if self.feature_dim < 1:
            raise ConfigError("backbone.feature_dim must be >= 1")


@dataclass
class CVConfig:
    mode: str = "loocv"
    k: int = 13
    seed: int = 0

    def __post_init__(self):
        if self.mode not in CV_MODES:
            raise ConfigError(f"cv.mode must be one of {CV_MODES}")
        if self.mode == "kfold" and self.k < 2:
            raise ConfigError("cv.k must be >= 2")


@dataclass
class AnalysisConfig:
    lrp_epsilon: float = 1e-6
    lrp_threshold: float = 0.0029
    lrp_mass_fraction: float = None
    lrp_candidates: int = 300
    greedy_delta: float = 0.005
    greedy_min_size: int = 1
    greedy_start_k: int = None
    topk: list = None
    tsne_perplexity: float = None
    tsne_iterations: int = 1000
    tsne_seed: int = 0

    def __post_init__(self):
        if self.lrp_epsilon < 0 or self.lrp_threshold < 0:
            raise ConfigError("analysis.lrp_epsilon and analysis.lrp_threshold must be >= 0")
        if self.lrp_mass_fraction is not None and not 0 < self.lrp_mass_fraction <= 1:
            raise ConfigError("analysis.lrp_mass_fraction must be in (0, 1]")
        if self.lrp_candidates < 1:
            raise ConfigError("analysis.lrp_candidates must be >= 1")
        if self.greedy_delta < 0 or self.greedy_min_size < 0:
            raise ConfigError("analysis.greedy_delta and analysis.greedy_min_size must be >= 0")
        if self.tsne_iterations < 250:
            raise ConfigError("analysis.tsne_iterations must be >= 250")


@dataclass
class RunConfig:
    output_dir: str = "runs"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("run.jobs must be >= 1")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    hfm: HfmConfig = field(default_factory=HfmConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    train: TrainHyper = field(default_factory=TrainHyper)
    cv: CVConfig = field(default_factory=CVConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        t = self.train
        if t.max_iter < 1 or t.batch_size < 1 or t.eval_every < 1:
            raise ConfigError("train.max_iter, train.batch_size and train.eval_every must be >= 1")
        if t.base_lr <= 0 or not 0 <= t.momentum < 1 or not 0 <= t.dropout < 1:
            raise ConfigError("train.base_lr > 0, train.momentum and train.dropout in [0, 1) required")
        if t.fusion_init not in INITS or t.fc_init not in INITS:
            raise ConfigError(f"train inits must be one of {INITS}")
        if t.precision not in PRECISIONS:
            raise ConfigError(f"train.precision must be one of {PRECISIONS}")
        if self.backbone.kind == "tiny" and self.hfm.crop < 8:
            raise ConfigError("the tiny backbone needs hfm.crop >= 8")

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "")

    def to_dict(self):
        return asdict(self)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        kwargs[name] = _build(hint, value, f"{where}{name}.") if is_dataclass(hint) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from None


def _merge(base, update):
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(text):
    """``section.key=value`` with a JSON value; bare words stay strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    cursor = node
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return node


def load_config(path=None, overrides=()):
    """Defaults, then the JSON file at ``path``, then overrides (dicts or ``key=value`` strings)."""
    data = ExperimentConfig().to_dict()
    if path:
        try:
            data = _merge(data, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for override in overrides:
        data = _merge(data, parse_override(override) if isinstance(override, str) else override)
    return ExperimentConfig.from_dict(data)


def write_config(config, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def cache_dir():
    """Feature cache directory from GAZECLASS_CACHE_DIR (``.env`` honoured), or None."""
    load_dotenv()
    value = os.environ.get("GAZECLASS_CACHE_DIR")
    return value or None
