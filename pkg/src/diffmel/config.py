"""Run configuration: schema, validation, defaults, round-trip dump.

A run config is a YAML file with five sections (feature, model, train,
eval, paths).  Loading applies defaults for missing keys, rejects unknown
keys, and checks cross-field invariants; errors name the offending field
by dotted path.
"""

# NOTE: no `from __future__ import annotations` here; the schema walker
# reads real types off dataclasses.fields().
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

# ARPAbet phone set plus silence/space markers; id 0 is reserved for padding.
DEFAULT_VOCAB = [
    "sil", "sp",
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER",
    "EY", "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW",
    "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
]

ABLATION_MODES = ("full", "no_spec_disc_spk_to_diff", "no_spec_disc_no_spk")
FAKE_X0_MODES = ("one_shot", "rollout")


@dataclass
class FeatureConfig:
    sample_rate: int = 22050
    n_mels: int = 80
    hop: int = 256
    window: int = 1024
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    normalize_mel: bool = True
    f0_min: float = 50.0
    f0_max: float = 800.0
    griffin_lim_iters: int = 60


@dataclass
class DiffusionConfig:
    T: int = 4
    schedule: str = "vp:0.1:40"


@dataclass
class DiscDiffusionConfig:
    blocks: int = 6
    kernel: int = 3
    base_channels: int = 32
    max_channels: int = 256


@dataclass
class DiscSpectrogramConfig:
    channels: int = 32
    conv2d_strided: int = 3
    conv2d_plain: int = 2
    kernel_strided: list = field(default_factory=lambda: [3, 9])
    kernel_plain: list = field(default_factory=lambda: [3, 3])
    stride_height: int = 1
    stride_widths: list = field(default_factory=lambda: [1, 2])
    padding_height: int = 1
    padding_widths: list = field(default_factory=lambda: [1, 4])


@dataclass
class ModelConfig:
    d_model: int = 256
    vocab: list = field(default_factory=lambda: list(DEFAULT_VOCAB))
    encoder_layers: int = 4
    encoder_heads: int = 2
    encoder_kernel: int = 9
    encoder_ff_dim: int = 1024
    encoder_dropout: float = 0.1
    variance_kernels: list = field(default_factory=lambda: [3, 5, 5])
    variance_hidden: int = 256
    variance_dropout: float = 0.1
    min_frames_per_phoneme: int = 1
    speaker_dim: int = 256
    speaker_mode: str = "lookup"
    decoder_blocks: int = 20
    decoder_channels: int = 256
    decoder_kernel: int = 3
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    disc_diffusion: DiscDiffusionConfig = field(default_factory=DiscDiffusionConfig)
    disc_spectrogram: DiscSpectrogramConfig = field(default_factory=DiscSpectrogramConfig)


@dataclass
class TrainConfig:
    alpha: float = 0.5
    batch_size: int = 16
    total_steps: int = 300_000
    lr_g: float = 1e-4
    lr_d: float = 2e-4
    adam_betas: list = field(default_factory=lambda: [0.5, 0.9])
    lr_decay: float = 1.0
    seed: int = 1234
    ablation_mode: str = "full"
    fake_x0_mode: str = "one_shot"
    d_updates_per_g: int = 1
    log_interval: int = 10
    checkpoint_interval: int = 1000
    validation_count: int = 512


@dataclass
class EvalConfig:
    metrics: list = field(default_factory=lambda: ["ssim", "mcd", "f0rmse"])
    align: str = "teacher"
    mcd_order: int = 24
    mcd_exclude_c0: bool = True
    stoi_tool: list | None = None
    pesq_tool: list | None = None
    figures: bool = True


@dataclass
class PathsConfig:
    data: str = "data/processed"
    runs: str = "runs"


@dataclass
class RunConfig:
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


_SCALARS = {int, float, str, bool}


def _coerce_scalar(typ, value, path):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    if not isinstance(value, typ):
        raise ConfigError(f"{path}: expected {typ.__name__}, got {type(value).__name__} ({value!r})")
    return value


def _from_dict(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where + unknown[0]!r}")
    kwargs = {}
    for name, f in known.items():
        sub = f"{path}.{name}" if path else name
        if name not in data:
            continue
        value = data[name]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, type) and dataclasses.is_dataclass(f.type)):
            kwargs[name] = _from_dict(f.type, value, sub)
        elif f.type in _SCALARS:
            kwargs[name] = _coerce_scalar(f.type, value, sub)
        elif f.type is list:
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list, got {type(value).__name__}")
            kwargs[name] = value
        else:  # optional lists (tool specs)
            if value is not None and not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list or null, got {type(value).__name__}")
            kwargs[name] = value
    return cls(**kwargs)


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig) -> RunConfig:
    """Cross-field invariants; raises ConfigError naming the field."""
    fe, mo, tr, ev = cfg.feature, cfg.model, cfg.train, cfg.eval
    _check(fe.sample_rate > 0, "feature.sample_rate: must be positive")
    _check(0 < fe.hop < fe.window, "feature.hop: must satisfy 0 < hop < window")
    _check(fe.fmax <= fe.sample_rate / 2,
           f"feature.fmax: must be <= sample_rate/2 ({fe.sample_rate / 2})")
    _check(0 <= fe.fmin < fe.fmax, "feature.fmin: must satisfy 0 <= fmin < fmax")
    _check(fe.n_mels >= 1, "feature.n_mels: must be >= 1")
    _check(fe.log_floor > 0, "feature.log_floor: must be positive")
    _check(0 < fe.f0_min < fe.f0_max, "feature.f0_min: must satisfy 0 < f0_min < f0_max")
    _check(fe.griffin_lim_iters >= 1, "feature.griffin_lim_iters: must be >= 1")

    _check(len(mo.vocab) >= 1, "model.vocab: must be non-empty")
    _check(len(set(mo.vocab)) == len(mo.vocab), "model.vocab: duplicate symbols")
    _check(mo.d_model >= 1, "model.d_model: must be >= 1")
    _check(mo.d_model % mo.encoder_heads == 0,
           "model.encoder_heads: must divide d_model")
    _check(mo.speaker_mode in ("lookup", "precomputed"),
           f"model.speaker_mode: must be one of lookup|precomputed, got {mo.speaker_mode!r}")
    _check(len(mo.variance_kernels) == 3,
           "model.variance_kernels: expected three kernel sizes (duration, pitch, energy)")
    _check(mo.min_frames_per_phoneme >= 1, "model.min_frames_per_phoneme: must be >= 1")
    _check(mo.diffusion.T >= 1, "model.diffusion.T: must be >= 1")
    _check(mo.decoder_blocks >= 1, "model.decoder_blocks: must be >= 1")
    _check(mo.disc_diffusion.blocks >= 1, "model.disc_diffusion.blocks: must be >= 1")

    _check(0.0 <= tr.alpha <= 1.0,
           f"train.alpha: must lie in [0, 1], got {tr.alpha}")
    _check(tr.batch_size >= 1, "train.batch_size: must be >= 1")
    _check(tr.total_steps >= 0, "train.total_steps: must be >= 0")
    _check(tr.ablation_mode in ABLATION_MODES,
           f"train.ablation_mode: must be one of {'|'.join(ABLATION_MODES)}, got {tr.ablation_mode!r}")
    _check(tr.fake_x0_mode in FAKE_X0_MODES,
           f"train.fake_x0_mode: must be one of {'|'.join(FAKE_X0_MODES)}, got {tr.fake_x0_mode!r}")
    _check(len(tr.adam_betas) == 2, "train.adam_betas: expected two coefficients")
    _check(0 < tr.lr_decay <= 1.0, "train.lr_decay: must lie in (0, 1]")
    _check(tr.d_updates_per_g >= 1, "train.d_updates_per_g: must be >= 1")

    _check(ev.align in ("teacher", "dtw"),
           f"eval.align: must be teacher|dtw, got {ev.align!r}")
    allowed = {"ssim", "mcd", "f0rmse", "stoi", "pesq"}
    for m in ev.metrics:
        _check(m in allowed, f"eval.metrics: unknown metric {m!r}")
    _check(ev.mcd_order >= 1, "eval.mcd_order: must be >= 1")
    return cfg


def from_dict(data: dict) -> RunConfig:
    return validate(_from_dict(RunConfig, data, ""))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    """Parse, default-fill, and validate a YAML config file."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    return from_dict(data or {})


def dump_config(cfg: RunConfig, path) -> None:
    """Write the fully-resolved config; reloading it round-trips."""
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def vocab_ids(vocab: list[str]) -> dict[str, int]:
    """Symbol -> id map; 0 is the padding id, symbols start at 1."""
    return {sym: i + 1 for i, sym in enumerate(vocab)}
