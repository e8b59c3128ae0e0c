"""Flat ``key = value`` experiment configuration.

Every key has a typed default; unknown keys are rejected. Two presets
exist: ``desk`` (the defaults below with a weaker L1 weight, 64x64 inputs)
and ``full`` (224x224, depth 4, 64 channels, 100 pruning epochs).
"""

from pathlib import Path

from .errors import ConfigError, MissingInputError
from .losses import LossWeights
from .network import NetworkConfig
from .slots import SlotConfig
from .synth import TRAIN_FRACTION, SceneParams

DEFAULTS = {
    "seed": 0,
    "network.input_size": 64,
    "network.depth": 3,
    "network.base_channels": 16,
    "network.stacks": 1,
    "network.large_feature_size": 28,
    "network.head_bias": -2.19,
    "select.dilations": (1, 2),
    "select.cen_hidden": 16,
    "select.epochs_per_layer": 2,
    "select.enabled": True,
    "prune.layer_threshold": 0.01,
    "prune.global_count": 5,
    "prune.min_ratio": 0.2,
    "loss.lambda_sl": 0.1,
    "loss.lambda_l1": 0.05,
    "loss.lambda_cen": 0.05,
    "loss.positive_threshold": 0.95,
    "loss.normalize": "positives",
    "optim.lr": 1e-3,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "train.batch_size": 16,
    "schedule.warmup_epochs": 5,
    "schedule.cen_epochs": 10,
    "schedule.prune_epochs": 30,
    "schedule.finetune_epochs": 15,
    "schedule.tiers": (1.0, 0.6, 0.4, 0.25),
    "schedule.deploy_tier": 0.6,
    "data.dir": "data",
    "data.num_scenes": 980,
    "data.train_fraction": TRAIN_FRACTION,
    "data.corner_sigma": 2.0,
    "data.line_sigma": 1.0,
    "scene.width_min": 16.0,
    "scene.width_max": 26.0,
    "scene.max_slots": 2,
    "scene.noise": 0.03,
    "scene.p_misleading": 0.3,
    "scene.p_shadow": 0.3,
    "scene.p_degraded": 0.2,
    "scene.p_occlusion": 0.2,
    "scene.p_orphan": 0.0,
    "slot.peak_threshold": 0.3,
    "slot.line_threshold": 0.25,
    "slot.nms_radius": 5.0,
    "slot.corridor": 4.0,
    "slot.d_min": 12.0,
    "slot.d_max": 32.0,
    "slot.probe_factor": 1.5,
    "eval.delta_px": 1.5,
    "eval.cm_per_px": 4.0,
    "eval.fppi": 0.1,
    "eval.latency_runs": 50,
    "checkpoint.keep_all": False,
}

PRESETS = {
    # At 64 px and 16 channels a 0.05 L1 weight outweighs the heatmap gradient
    # of most weights under Adam and drives the whole network to zero within
    # two pruning epochs; 1e-3 stays below the median heatmap gradient.
    "desk": {"loss.lambda_l1": 1e-3},
    "full": {
        "loss.lambda_l1": 0.05,
        "network.input_size": 224,
        "network.depth": 4,
        "network.base_channels": 64,
        "schedule.prune_epochs": 100,
        "data.num_scenes": 9527 + 2138,
        "scene.width_min": 56.0,
        "scene.width_max": 91.0,
        "slot.d_min": 42.0,
        "slot.d_max": 112.0,
        "slot.nms_radius": 17.0,
        "slot.corridor": 14.0,
        "data.corner_sigma": 7.0,
    },
}


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            items = [t for t in text.replace(" ", "").split(",") if t]
            return tuple(elem(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


class Config:
    def __init__(self, values=None, preset="desk"):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        self.values = dict(DEFAULTS)
        self.values.update(PRESETS[preset])
        for k, v in (values or {}).items():
            self.set(k, v)

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(key, value, DEFAULTS[key])
        elif isinstance(DEFAULTS[key], tuple):
            value = tuple(value)
        self.values[key] = value
        return self

    def copy(self, updates=None):
        c = Config()
        c.values = dict(self.values)
        for k, v in (updates or {}).items():
            c.set(k, v)
        return c

    def dump(self):
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(repr(x) for x in v)
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(v) if isinstance(v, float) else str(v)

        return "".join(f"{k} = {fmt(self.values[k])}\n" for k in sorted(self.values))

    # -- typed views ------------------------------------------------------------
    def network(self):
        dil = self["select.dilations"] if self["select.enabled"] else (1,)
        return NetworkConfig(
            input_size=self["network.input_size"],
            depth=self["network.depth"],
            base_channels=self["network.base_channels"],
            stacks=self["network.stacks"],
            dilations=tuple(dil),
            large_feature_size=self["network.large_feature_size"],
            cen_hidden=self["select.cen_hidden"],
            head_bias=self["network.head_bias"],
        )

    def loss_weights(self):
        return LossWeights(
            lambda_sl=self["loss.lambda_sl"],
            lambda_cen=self["loss.lambda_cen"],
            lambda_l1=self["loss.lambda_l1"],
            positive_threshold=self["loss.positive_threshold"],
            normalize=self["loss.normalize"],
        )

    def slot_config(self):
        return SlotConfig(
            peak_threshold=self["slot.peak_threshold"],
            line_threshold=self["slot.line_threshold"],
            nms_radius=self["slot.nms_radius"],
            corridor=self["slot.corridor"],
            d_min=self["slot.d_min"],
            d_max=self["slot.d_max"],
            probe_factor=self["slot.probe_factor"],
        )

    def scene_params(self):
        return SceneParams(
            size=self["network.input_size"],
            width_min=self["scene.width_min"],
            width_max=self["scene.width_max"],
            max_slots=self["scene.max_slots"],
            noise=self["scene.noise"],
            p_misleading=self["scene.p_misleading"],
            p_shadow=self["scene.p_shadow"],
            p_degraded=self["scene.p_degraded"],
            p_occlusion=self["scene.p_occlusion"],
            p_orphan=self["scene.p_orphan"],
        )


def parse_config_text(text, preset="desk", source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in body.split("=", 1))
        if key == "preset":
            preset = value
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return Config(values, preset=preset)


def load_config(path=None, overrides=(), preset="desk"):
    """Read a config file (optional) and apply ``key=value`` overrides."""
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingInputError(f"config file not found: {p}")
        cfg = parse_config_text(p.read_text(), preset=preset, source=str(p))
    else:
        cfg = Config(preset=preset)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg
