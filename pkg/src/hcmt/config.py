"""Training configuration and its flat ``dotted.key = value`` text format.

The snapshot written into every run directory lists every resolved value,
defaults included, so a run can be re-executed from it alone.
"""

from __future__ import annotations

import ast
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from hcmt.backbone import NetworkSpec
from hcmt.errors import ConfigError
from hcmt.losses import DEFAULT_SCALE_WEIGHTS
from hcmt.perturb import PerturbationSpec

# mode -> (use_hs, use_hu, use_teacher)
MODES: dict[str, tuple[bool, bool, bool]] = {
    "vnet": (False, False, False),
    "vnet_hs": (True, False, False),
    "mt": (False, False, True),
    "mt_hu": (False, True, True),
    "mt_hs": (True, False, True),
    "mt_hu_hs": (True, True, True),
}

MODE_LABELS = {
    "vnet": "V-Net",
    "vnet_hs": "V-Net + HS",
    "mt": "MT",
    "mt_hu": "MT + HU",
    "mt_hs": "MT + HS",
    "mt_hu_hs": "MT + HU + HS",
}


@dataclass
class DataConfig:
    synthetic: bool = False
    root: str = ""
    split_file: str = ""
    # synthetic generation
    grid_size: int = 64
    n_labeled: int = 16
    n_unlabeled: int = 64
    n_test: int = 20
    synthetic_seed: int = 0
    split_seed: int = 0
    noise_sigma: float = 0.35
    bias_strength: float = 0.3
    contrast: float = 0.7
    distractors: int = 3
    # preprocessing
    crop_to_mask: bool = True
    margin: int = 25


@dataclass
class TrainConfig:
    total_iterations: int = 6000
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 2500
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    labeled_per_batch: int = 2
    eta: float = 0.99
    ema_warmup: bool = False
    ema_after_step: bool = True
    lambda_max: float = 0.1
    scale_weights: tuple[float, ...] = DEFAULT_SCALE_WEIGHTS
    mode: str = "mt_hu_hs"
    # explicit flags override the mode preset when set
    use_hs: bool | None = None
    use_hu: bool | None = None
    use_teacher: bool | None = None
    patch_shape: tuple[int, int, int] = (112, 112, 80)
    eval_stride: tuple[int, int, int] | None = None
    seed: int = 1337
    data_seed: int = 1337
    noise_seed: int = 1337
    checkpoint_every: int = 1000
    dtype: str = "float32"
    device: str = "cpu"
    network: NetworkSpec = field(default_factory=NetworkSpec)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.scale_weights = tuple(float(a) for a in self.scale_weights)
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        if self.eval_stride is not None:
            self.eval_stride = tuple(int(s) for s in self.eval_stride)

    # -- resolved mode flags
    def flags(self) -> tuple[bool, bool, bool]:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {sorted(MODES)}")
        hs, hu, teacher = MODES[self.mode]
        return (hs if self.use_hs is None else self.use_hs,
                hu if self.use_hu is None else self.use_hu,
                teacher if self.use_teacher is None else self.use_teacher)

    def resolved(self) -> "TrainConfig":
        cfg = dataclasses.replace(self)
        cfg.use_hs, cfg.use_hu, cfg.use_teacher = self.flags()
        return cfg

    def validate(self) -> None:
        self.flags()
        self.network.validate()
        self.perturbation.validate()
        counts = {
            "total_iterations": self.total_iterations,
            "batch_size": self.batch_size,
            "labeled_per_batch": self.labeled_per_batch,
            "lr_decay_every": self.lr_decay_every,
            "checkpoint_every": self.checkpoint_every,
        }
        for name, value in counts.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.labeled_per_batch > self.batch_size:
            raise ConfigError("labeled_per_batch cannot exceed batch_size")
        if len(self.scale_weights) != self.network.num_scales:
            raise ConfigError(
                f"{len(self.scale_weights)} scale weights for {self.network.num_scales} scales")
        if any(a < 0 for a in self.scale_weights) or not any(a > 0 for a in self.scale_weights):
            raise ConfigError(f"scale weights must be non-negative with one positive: {self.scale_weights}")
        if not 0 <= self.eta <= 1:
            raise ConfigError("eta must lie in [0, 1]")
        if len(self.patch_shape) != 3:
            raise ConfigError("patch_shape needs three entries")
        for axis, p in zip("HWD", self.patch_shape):
            if p % self.network.divisor:
                raise ConfigError(f"patch_shape axis {axis}={p} not divisible by {self.network.divisor}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.data.synthetic and not self.data.root:
            raise ConfigError("data.root is required unless data.synthetic = true")

    # -- flat text form
    def to_flat(self) -> dict[str, Any]:
        return dict(_flatten(self))

    def dumps(self) -> str:
        lines = ["# hcmt training configuration"]
        for key, value in self.to_flat().items():
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "TrainConfig":
        cfg = cls()
        for key, value in flat.items():
            set_key(cfg, key, value)
        cfg.__post_init__()
        cfg.network.__post_init__()
        return cfg

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        return cls.from_flat(parse_flat(text))

    @classmethod
    def load(cls, path: str | Path, overrides: Iterable[str] = ()) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        flat = parse_flat(text)
        flat.update(parse_overrides(overrides))
        return cls.from_flat(flat)


def _flatten(obj, prefix: str = ""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        else:
            yield key, value


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value) if (value == "" or value != value.strip() or "," in value) else value
    return str(value)


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    if text.startswith('"'):
        return json.loads(text)
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_flat(text: str) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith('"') else raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _coerce(value, current, annotation: str):
    if value is None:
        # a bare "none" is a legitimate value for string enums such as noise_kind
        return "none" if isinstance(current, str) else None
    if isinstance(current, bool) or annotation.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}")
        return value
    if isinstance(current, tuple) or "tuple" in annotation:
        value = value if isinstance(value, tuple) else (value,)
        return tuple(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}")
        return value
    if isinstance(current, str):
        return str(value)
    return value


def set_key(cfg, key: str, value) -> None:
    obj = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    name = parts[-1]
    fields = {f.name: f for f in dataclasses.fields(obj)} if dataclasses.is_dataclass(obj) else {}
    if name not in fields or dataclasses.is_dataclass(getattr(obj, name)):
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(obj, name, _coerce(value, getattr(obj, name), str(fields[name].type)))
    except ConfigError as exc:
        raise ConfigError(f"{key}: {exc}") from None
