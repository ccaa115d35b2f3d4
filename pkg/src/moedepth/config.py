"""Plain-text ``key=value`` run configuration with per-key command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .evalkit import EdgeConfig
from .mixture import LossConfig
from .network import NetConfig
from .synthscene import SceneSpec
from .trainer import DESK_LR, TrainRun


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # dataset
    count: int = 64
    height: int = 64
    width: int = 64
    num_objects: int = -1  # -1: uniform in 1..5
    near: float = 1.0
    far: float = 10.0
    noise_std: float = 0.05
    edge_floor: float = 0.25
    # network
    input_channels: int = 3
    feature_channels: int = 16
    experts: int = 4
    kernel_size: int = 3
    encoder_layers: int = 2
    expert_noise: float = 1e-3
    depth_bias: float = 0.0
    # loss
    sigma: float = 1.0
    lambda_d: float = 1.0
    lambda_e: float = 1e-4
    # optimisation
    steps: int = 2000
    lr: float = DESK_LR
    weight_decay: float = 0.05
    tau0: float = 1.0
    tau_decay: float = 0.995
    tau_floor: float = 0.1
    freeze_encoder: bool = False
    # ablation / evaluation
    lambdas: str = "1e-2,1e-3,1e-4,0"
    heldout: int = 4
    edge_threshold: float = 50.0
    scale_to_255: bool = True
    confidence_mask: float = 1.0
    flying_k: int = 8
    flying_ratio: float = 3.0

    # ---- conversions -------------------------------------------------
    def scene_spec(self):
        return SceneSpec(
            height=self.height, width=self.width,
            num_objects=None if self.num_objects < 0 else self.num_objects,
            near=self.near, far=self.far, noise_std=self.noise_std, edge_floor=self.edge_floor,
        )

    def net_config(self):
        return NetConfig(
            input_channels=self.input_channels, feature_channels=self.feature_channels,
            num_experts=self.experts, kernel_size=self.kernel_size, encoder_layers=self.encoder_layers,
            seed=self.seed, expert_noise=self.expert_noise, depth_bias=self.depth_bias,
        )

    def loss_config(self):
        return LossConfig(sigma=self.sigma, lambda_d=self.lambda_d, lambda_e=self.lambda_e)

    def train_run(self, scenes):
        return TrainRun(
            net=self.net_config(), loss=self.loss_config(), scenes=scenes, steps=self.steps, seed=self.seed,
            lr=self.lr, weight_decay=self.weight_decay, tau0=self.tau0, tau_decay=self.tau_decay,
            tau_floor=self.tau_floor, freeze_encoder=self.freeze_encoder,
        )

    def edge_config(self):
        return EdgeConfig(threshold=self.edge_threshold, scale_to_255=self.scale_to_255)

    def lambda_list(self):
        try:
            return [float(x) for x in self.lambdas.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad lambdas list {self.lambdas!r}") from exc

    # ---- text form ---------------------------------------------------
    def to_text(self):
        return "".join(f"{f.name}={format_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text, base=None):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            values[key.strip()] = value.strip()
        return (base or cls()).with_overrides(values)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, values):
        known = {f.name: f for f in fields(self)}
        parsed = {}
        for key, value in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[name] = parse_value(known[name].type, value, key)
        return replace(self, **parsed)


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(type_name, text, key):
    t = type_name if isinstance(type_name, str) else type_name.__name__
    text = str(text).strip()
    try:
        if t == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def field_names():
    return [f.name for f in fields(RunConfig)]
